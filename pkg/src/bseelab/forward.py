"""Exponential-Euler simulators for the forward equations.

Every simulator reduces to one step

    x_{k+1} = S(dt) [ x_k + dt (J_k x_k + u_k) + sum_i dw_i (K_i,k x_k + v_i,k) ]

executed by ``kernels.linear_step``.  Coefficients may be given as

* ``None`` (absent),
* a constant array (J: (m,m), K: (d,m,m), u: (m,), v: (d,m)),
* a process array with leading (P, N+1) axes,
* a callable ``c(k, x_k) -> array`` evaluated at the left endpoint.

Values before the start index are zero.
"""

import numpy as np

from . import kernels
from .model_space import LiftedSemigroup
from .stochastic import AdaptedProcess

_BASE_NDIM = {"J": 2, "K": 3, "u": 1, "v": 2}


def coef_at(C, k, x, name):
    """Coefficient ``name`` at step k given the current state x (P, m)."""
    if C is None:
        return None
    if callable(C):
        return C(k, x)
    C = np.asarray(C)
    base = _BASE_NDIM[name]
    if C.ndim == base:
        return C
    if C.ndim == base + 2:
        return C[:, k]
    if C.ndim == base + 1:  # already per path, constant in time
        return C
    raise ValueError(f"coefficient {name} has incompatible shape {C.shape}")


def _check_dims(m, d, J=None, K=None, u=None, v=None):
    for name, C in (("J", J), ("K", K), ("u", u), ("v", v)):
        if C is None or callable(C):
            continue
        C = np.asarray(C)
        if name == "J" and C.shape[-2:] != (m, m):
            raise ValueError(f"J must end in ({m},{m}), got {C.shape}")
        if name == "K" and C.shape[-3:] != (d, m, m):
            raise ValueError(f"K must end in ({d},{m},{m}), got {C.shape}")
        if name == "u" and C.shape[-1] != m:
            raise ValueError(f"u must end in ({m},), got {C.shape}")
        if name == "v" and C.shape[-2:] != (d, m):
            raise ValueError(f"v must end in ({d},{m}), got {C.shape}")


def _initial(x0, P, m):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == (m,):
        return np.broadcast_to(x0, (P, m)).copy()
    if x0.shape == (P, m):
        return x0.copy()
    raise ValueError(f"initial datum must have shape ({m},) or ({P},{m}), got {x0.shape}")


def march(semigroup, grid, noise, x0, start=0, stop=None, J=None, K=None, u=None, v=None,
          workers=1, backend=None):
    """Generic exponential-Euler sweep from step ``start`` to ``stop``."""
    if noise.grid != grid:
        raise ValueError("noise and grid disagree")
    stop = grid.steps if stop is None else int(stop)
    start = int(start)
    if not 0 <= start <= stop <= grid.steps:
        raise ValueError(f"bad step range [{start}, {stop}] on {grid.steps} steps")
    m = semigroup.dim
    P, d = noise.n_paths, noise.d
    _check_dims(m, d, J, K, u, v)
    out = np.zeros((P, grid.steps + 1, m))
    out[:, start] = _initial(x0, P, m)
    S = semigroup(grid.dt)
    for k in range(start, stop):
        x = out[:, k]
        out[:, k + 1] = kernels.linear_step(
            S, x, coef_at(J, k, x, "J"), coef_at(K, k, x, "K"), coef_at(u, k, x, "u"),
            coef_at(v, k, x, "v"), noise.increments[:, k], grid.dt, workers=workers, backend=backend)
    return AdaptedProcess(grid, out, {"start": start, "stop": stop})


def start_index(grid, t=None, start=None):
    if start is not None:
        return int(start)
    return 0 if t is None else grid.index(t)


def simulate_mild(semigroup, grid, noise, eta, psi1=None, psi2=None, t=None, start=None, **kw):
    """z(s) = S(s-t) eta + int S(s-r) psi1 dr + int S(s-r) psi2 dw."""
    return march(semigroup, grid, noise, eta, start=start_index(grid, t, start), u=psi1, v=psi2, **kw)


def simulate_linear(semigroup, grid, noise, xi, J=None, K=None, u=None, v=None, t=None, start=None, **kw):
    """dx = (A+J)x ds + u ds + (K x + v) dw from x(t) = xi."""
    return march(semigroup, grid, noise, xi, start=start_index(grid, t, start), J=J, K=K, u=u, v=v, **kw)


def flow_operator(semigroup, grid, noise, h, J=None, K=None, t=None, start=None, stop=None, **kw):
    """U(., t_i) h: the homogeneous linear flow started at t_i from h."""
    return march(semigroup, grid, noise, h, start=start_index(grid, t, start), stop=stop, J=J, K=K, **kw)


class ControlValueError(ValueError):
    pass


def simulate_controlled(problem, control, grid, noise, x0=None, **kw):
    """x for dx = [Ax + a(t,x,u)]dt + b(t,x,u)dw.

    ``control`` is an array (P, N, k) of left-endpoint values (a constant
    (k,) vector is broadcast) or a feedback callable ``(k, t, x) -> (P, k)``.
    Returns the state process and the realized control array.
    """
    P = noise.n_paths
    x0 = problem.x0 if x0 is None else x0
    realized = np.zeros((P, grid.steps, problem.control_dim))
    if not callable(control):
        arr = np.asarray(control, dtype=float)
        if arr.ndim == 1:
            arr = np.broadcast_to(arr, (P, grid.steps, problem.control_dim))
        if arr.shape != (P, grid.steps, problem.control_dim):
            raise ValueError(f"control array must be ({P},{grid.steps},{problem.control_dim}), got {arr.shape}")
        realized[:] = arr
    problem.controls.check(realized if not callable(control) else None)

    def ctrl(k, x):
        if callable(control):
            uk = np.asarray(control(k, grid.time(k), x), dtype=float).reshape(P, problem.control_dim)
            problem.controls.check(uk)
            realized[:, k] = uk
        return realized[:, k]

    def drift(k, x):
        return problem.a(grid.time(k), x, ctrl(k, x))

    def diffusion(k, x):
        return problem.b(grid.time(k), x, realized[:, k])

    x = march(problem.semigroup, grid, noise, x0, u=drift, v=diffusion, **kw)
    return x, realized


def simulate_tensor(semigroup, grid, noise, x1, x2, J=None, K=None, u1=None, u2=None, v1=None, v2=None,
                    start=0, ito="realized", **kw):
    """O = x2 x1^T (so O x = <x, x1> x2) integrated in the lifted m^2 space.

    The quadratic-variation terms K O K^T, (K x1) (x) v2, v1 (x) (K x2) and
    v1 (x) v2 are weighted by the realized dw_i dw_j ("realized") or by
    dt delta_ij ("expected").
    """
    if ito not in ("realized", "expected"):
        raise ValueError(f"ito must be 'realized' or 'expected', got {ito!r}")
    X1 = x1.values if isinstance(x1, AdaptedProcess) else np.asarray(x1)
    X2 = x2.values if isinstance(x2, AdaptedProcess) else np.asarray(x2)
    if X1.shape != X2.shape:
        raise ValueError("x1 and x2 must share shape")
    P, Np1, m = X1.shape
    if Np1 != grid.steps + 1 or P != noise.n_paths:
        raise ValueError("x1/x2 inconsistent with grid or noise")
    d = noise.d
    eye = np.eye(m)
    dt = grid.dt
    lifted = LiftedSemigroup(semigroup)

    def weights(k):
        dw = noise.increments[:, k]
        if ito == "realized":
            return np.einsum("pi,pj->pij", dw, dw) / dt
        return np.broadcast_to(np.eye(d), (P, d, d))

    def Jl(k, _):
        Jk = coef_at(J, k, X1[:, k], "J")
        Kk = coef_at(K, k, X1[:, k], "K")
        out = np.zeros((P, m * m, m * m))
        if Jk is not None:
            Jk = np.broadcast_to(Jk, (P, m, m))
            out += np.einsum("pab,cd->pacbd", Jk, eye).reshape(P, m * m, m * m)
            out += np.einsum("ab,pcd->pacbd", eye, Jk).reshape(P, m * m, m * m)
        if Kk is not None:
            Kk = np.broadcast_to(Kk, (P, d, m, m))
            w = weights(k)
            out += np.einsum("pij,piab,pjcd->pacbd", w, Kk, Kk).reshape(P, m * m, m * m)
        return out

    def Kl(k, _):
        Kk = coef_at(K, k, X1[:, k], "K")
        if Kk is None:
            return None
        Kk = np.broadcast_to(Kk, (P, d, m, m))
        out = np.einsum("piab,cd->piacbd", Kk, eye) + np.einsum("ab,picd->piacbd", eye, Kk)
        return out.reshape(P, d, m * m, m * m)

    def outer(a, b):  # a (x) b = b a^T, row-major vec
        return np.einsum("p...j,p...i->p...ij", a, b)

    def ul(k, _):
        a1, a2 = X1[:, k], X2[:, k]
        acc = np.zeros((P, m, m))
        uk1 = coef_at(u1, k, a1, "u")
        uk2 = coef_at(u2, k, a2, "u")
        if uk1 is not None:
            acc += outer(np.broadcast_to(uk1, (P, m)), a2)
        if uk2 is not None:
            acc += outer(a1, np.broadcast_to(uk2, (P, m)))
        vk1 = coef_at(v1, k, a1, "v")
        vk2 = coef_at(v2, k, a2, "v")
        Kk = coef_at(K, k, a1, "K")
        if vk1 is not None or vk2 is not None:
            w = weights(k)
            Kx1 = np.einsum("piab,pb->pia", np.broadcast_to(Kk, (P, d, m, m)), a1) if Kk is not None else None
            Kx2 = np.einsum("piab,pb->pia", np.broadcast_to(Kk, (P, d, m, m)), a2) if Kk is not None else None
            V1 = None if vk1 is None else np.broadcast_to(vk1, (P, d, m))
            V2 = None if vk2 is None else np.broadcast_to(vk2, (P, d, m))
            # sum_ij w_ij (K_i x2 + v2_i)(K_j x1 + v1_j)^T minus the K O K^T part
            if V2 is not None and Kx1 is not None:
                acc += np.einsum("pij,pia,pjb->pab", w, V2, Kx1)
            if V1 is not None and Kx2 is not None:
                acc += np.einsum("pij,pia,pjb->pab", w, Kx2, V1)
            if V1 is not None and V2 is not None:
                acc += np.einsum("pij,pia,pjb->pab", w, V2, V1)
        return acc.reshape(P, m * m)

    def vl(k, _):
        a1, a2 = X1[:, k], X2[:, k]
        vk1 = coef_at(v1, k, a1, "v")
        vk2 = coef_at(v2, k, a2, "v")
        if vk1 is None and vk2 is None:
            return None
        acc = np.zeros((P, d, m, m))
        if vk1 is not None:
            acc += np.einsum("pij,pa->piaj", np.broadcast_to(vk1, (P, d, m)), a2)
        if vk2 is not None:
            acc += np.einsum("pia,pj->piaj", np.broadcast_to(vk2, (P, d, m)), a1)
        return acc.reshape(P, d, m * m)

    O0 = outer(X1[:, start], X2[:, start]).reshape(P, m * m)
    res = march(lifted, grid, noise, O0, start=start, J=Jl, K=Kl, u=ul, v=vl, **kw)
    return AdaptedProcess(grid, res.values.reshape(P, Np1, m, m), {"start": start, "ito": ito})


def outer_product_process(x1, x2):
    """Pointwise x2 x1^T, the oracle for ``simulate_tensor``."""
    X1 = x1.values if isinstance(x1, AdaptedProcess) else np.asarray(x1)
    X2 = x2.values if isinstance(x2, AdaptedProcess) else np.asarray(x2)
    return np.einsum("pkj,pki->pkij", X1, X2)
