"""Operator-valued backward equation

    dP = -(A+J)^T P dt - P (A+J) dt - sum_i K_i^T P K_i dt
         - sum_i (K_i^T Q_i + Q_i K_i) dt + F dt + sum_i Q_i dw_i,   P(T) = P_T,

solved through the row-major vectorisation vec(P) (lifted generator
A (x) I + I (x) A), plus the duality checks and the partition machinery.

Conventions: P is (P, N+1, m, m); Q is (P, N+1, d, m, m).  Coefficients J, K,
F are constants or process arrays as in ``forward``.
"""

from dataclasses import dataclass, field

import numpy as np

from .forward import coef_at, flow_operator, simulate_linear
from .model_space import LiftedSemigroup, lift_generator, project  # noqa: F401  (re-export)
from .regression import Projector
from .stochastic import AdaptedProcess, expect_inner, mixed_norm, pairing
from .vector_bsee import BseeData, solve_backward_regression

__all__ = ["OperatorBseeData", "OperatorBseeSolution", "lift_generator", "solve_operator_bsee",
           "solve_operator_bsee_matrix", "transposition_residual_operator", "apply_Q_relaxed",
           "galerkin_sequence", "partition_project", "build_Qn", "partition_identity_check"]


@dataclass
class OperatorBseeData:
    P_T: np.ndarray  # (P, m, m)
    F: object = None
    J: object = None
    K: object = None
    label: str = ""

    @property
    def m(self):
        return self.P_T.shape[-1]


@dataclass
class OperatorBseeSolution:
    P: AdaptedProcess
    Q: AdaptedProcess
    start: int = 0
    report: dict = field(default_factory=dict)


def _coef(C, k, P, shape, name):
    c = coef_at(C, k, None, name)
    if c is None:
        return None
    return np.broadcast_to(np.asarray(c, dtype=float), (P,) + shape)


def operator_driver(data, d, drop_KPK=False):
    """f(t,P,Q) = -J^T P - P J - K^T P K - K^T Q - Q K + F on vectorised arguments."""
    m = data.m

    def f(k, y, Y):
        P = y.shape[0]
        Pm = y.reshape(P, m, m)
        Qm = Y.reshape(P, d, m, m)
        out = np.zeros((P, m, m))
        J = _coef(data.J, k, P, (m, m), "J")
        K = _coef(data.K, k, P, (d, m, m), "K")
        F = _coef(data.F, k, P, (m, m), "J")
        if J is not None:
            out -= np.einsum("pba,pbc->pac", J, Pm) + np.einsum("pab,pbc->pac", Pm, J)
        if K is not None:
            if not drop_KPK:
                out -= np.einsum("piba,pbc,picd->pad", K, Pm, K)
            out -= np.einsum("piba,pibc->pac", K, Qm) + np.einsum("piab,pibc->pac", Qm, K)
        if F is not None:
            out += F
        return out.reshape(P, m * m)

    return f


def solve_operator_bsee(data, semigroup, grid, noise, basis, start=0, drop_KPK=False, **kw):
    """Vectorise, call the vector regression solver with the lifted semigroup, reshape."""
    P_T = np.asarray(data.P_T, dtype=float)
    Pn, m, _ = P_T.shape
    d = noise.d
    trivial = data.J is None and data.K is None and data.F is None
    vdata = BseeData(P_T.reshape(Pn, m * m), None if trivial else operator_driver(data, d, drop_KPK))
    sol = solve_backward_regression(vdata, LiftedSemigroup(semigroup), grid, noise, basis, start=start, **kw)
    Pv = sol.y.values.reshape(Pn, grid.steps + 1, m, m)
    Qv = sol.Y.values.reshape(Pn, grid.steps + 1, d, m, m)
    return OperatorBseeSolution(AdaptedProcess(grid, Pv), AdaptedProcess(grid, Qv), start,
                                dict(sol.report, lifted=True, drop_KPK=drop_KPK))


def solve_operator_bsee_matrix(data, semigroup, grid, noise, basis, start=0):
    """Independent matrix-form backward recursion (small m), no vectorisation.

        V = S^T P_{k+1} S,  Phat = E_k[V],  Q_i = E_k[(V - Phat) dw_i]/dt,
        P_k = Phat - dt f(t_k, Phat, Q_k)   with f evaluated entrywise by loops.
    """
    P_T = np.asarray(data.P_T, dtype=float)
    Pn, m, _ = P_T.shape
    if m > 3:
        raise ValueError("the matrix reference solver is meant for m <= 3")
    d, dt, N = noise.d, grid.dt, grid.steps
    S = semigroup(dt)
    Pv = np.zeros((Pn, N + 1, m, m))
    Qv = np.zeros((Pn, N + 1, d, m, m))
    Pv[:, N] = P_T
    for k in range(N - 1, start - 1, -1):
        pr = Projector(basis.features(k), step=k, drop_collinear=getattr(basis, "drop_collinear", False))
        V = np.zeros((Pn, m, m))
        for a in range(m):
            for b in range(m):
                acc = np.zeros(Pn)
                for c in range(m):
                    for e in range(m):
                        acc = acc + S[c, a] * Pv[:, k + 1, c, e] * S[e, b]
                V[:, a, b] = acc
        Ph = pr(V)
        dw = noise.increments[:, k]
        Qk = np.zeros((Pn, d, m, m))
        for i in range(d):
            Qk[:, i] = pr((V - Ph) * dw[:, i, None, None]) / dt
        J = _coef(data.J, k, Pn, (m, m), "J")
        K = _coef(data.K, k, Pn, (d, m, m), "K")
        F = _coef(data.F, k, Pn, (m, m), "J")
        fk = np.zeros((Pn, m, m))
        for a in range(m):
            for b in range(m):
                acc = np.zeros(Pn)
                for c in range(m):
                    if J is not None:
                        acc = acc - J[:, c, a] * Ph[:, c, b] - Ph[:, a, c] * J[:, c, b]
                    if K is not None:
                        for i in range(d):
                            acc = acc - K[:, i, c, a] * Qk[:, i, c, b] - Qk[:, i, a, c] * K[:, i, c, b]
                            for e in range(m):
                                acc = acc - K[:, i, c, a] * Ph[:, c, e] * K[:, i, e, b]
                if F is not None:
                    acc = acc + F[:, a, b]
                fk[:, a, b] = acc
        Pv[:, k] = Ph - dt * fk
        Qv[:, k] = Qk
    return OperatorBseeSolution(AdaptedProcess(grid, Pv), AdaptedProcess(grid, Qv), start,
                                {"scheme": "matrix_reference"})


def lyapunov_closed_form(semigroup, grid, P_T):
    """S(T-t)^T P_T S(T-t) at every node (deterministic P_T)."""
    T = grid.t_end
    return np.stack([semigroup(T - t).T @ P_T @ semigroup(T - t) for t in grid.nodes])


def symmetry_defect(sol):
    Pv = sol.P.values
    num = np.linalg.norm(Pv - np.swapaxes(Pv, -1, -2), axis=(-2, -1))
    den = np.maximum(np.linalg.norm(Pv, axis=(-2, -1)), 1e-300)
    Qv = sol.Q.values
    qnum = np.linalg.norm(Qv - np.swapaxes(Qv, -1, -2), axis=(-2, -1))
    qden = np.linalg.norm(Qv, axis=(-2, -1))
    qrel = float(np.max(qnum) / np.max(qden)) if np.max(qden) > 0 else 0.0
    return {"P_relative": float(np.max(num / den)), "Q_relative": qrel}


# -- duality residuals ------------------------------------------------------

def _bc(C, P, shape):
    return None if C is None else np.broadcast_to(C, (P,) + shape)


def _pair_with(mat, vec):
    return np.einsum("p...ab,p...b->p...a", mat, vec)


def _forward_pair(solution, data, semigroup, grid, noise, test1, test2, start):
    J, K = data.J, data.K
    x1 = simulate_linear(semigroup, grid, noise, test1["xi"], J=J, K=K, u=test1.get("u"), v=test1.get("v"),
                         start=start).values
    x2 = simulate_linear(semigroup, grid, noise, test2["xi"], J=J, K=K, u=test2.get("u"), v=test2.get("v"),
                         start=start).values
    return x1, x2


def _process(C, P, N1, shape):
    if C is None:
        return None
    C = np.asarray(C, dtype=float)
    if C.ndim == len(shape):
        return np.broadcast_to(C, (P, N1) + shape)
    return C


def transposition_residual_operator(solution, data, semigroup, grid, noise, test1, test2, start=0,
                                    relaxed=False):
    """Eight-term identity

      E<P_T x1(T), x2(T)> - E int <F x1, x2>
        = E<P(t) xi1, xi2> + E int <P u1, x2> + E int <P x1, u2> + E int <P K x1, v2>
          + E int <P v1, K x2 + v2> + [Q terms]

    where the Q terms are  E int <Q v1, x2> + E int <x1, Q^T v2>  or, with
    ``relaxed``,  E int <v1, Qhat(xi2,u2,v2)> + E int <Q(xi1,u1,v1), v2>.
    """
    if solution.P.grid != grid:
        raise ValueError("solution grid differs from test grid")
    Pn, N1, m, _ = solution.P.values.shape
    d = noise.d
    N = grid.steps
    Pv, Qv = solution.P.values, solution.Q.values
    x1, x2 = _forward_pair(solution, data, semigroup, grid, noise, test1, test2, start)
    u1 = _process(test1.get("u"), Pn, N1, (m,))
    u2 = _process(test2.get("u"), Pn, N1, (m,))
    v1 = _process(test1.get("v"), Pn, N1, (d, m))
    v2 = _process(test2.get("v"), Pn, N1, (d, m))
    Kp = _process(data.K, Pn, N1, (d, m, m))
    Fp = _process(data.F, Pn, N1, (m, m))
    dt = grid.dt

    def integ(a, b):
        return pairing(a, b, dt=dt, start=start, stop=N)

    xi1 = np.broadcast_to(test1["xi"], (Pn, m))
    xi2 = np.broadcast_to(test2["xi"], (Pn, m))
    names = ["P_T", "F", "P(t)", "Pu1", "Pu2", "PKx1v2", "Pv1", "Qv1", "Qv2"]
    vals = dict.fromkeys(names, 0.0)
    vals["P_T"] = expect_inner(_pair_with(np.asarray(data.P_T), x1[:, N]), x2[:, N])
    if Fp is not None:
        vals["F"] = integ(_pair_with(Fp, x1), x2)
    vals["P(t)"] = expect_inner(_pair_with(Pv[:, start], xi1), xi2)
    if u1 is not None:
        vals["Pu1"] = integ(_pair_with(Pv, u1), x2)
    if u2 is not None:
        vals["Pu2"] = integ(_pair_with(Pv, x1), u2)
    Kx1 = _pair_with(Kp, x1[:, :, None, :]) if Kp is not None else None
    Kx2 = _pair_with(Kp, x2[:, :, None, :]) if Kp is not None else None
    PP = Pv[:, :, None]
    if v2 is not None and Kx1 is not None:
        vals["PKx1v2"] = integ(_pair_with(PP, Kx1), v2)
    if v1 is not None:
        rhs = v2 if Kx2 is None else (Kx2 if v2 is None else Kx2 + v2)
        if rhs is not None:
            vals["Pv1"] = integ(_pair_with(PP, v1), rhs)
    if relaxed:
        if v1 is not None:
            qh = apply_Q_relaxed(solution, "Qhat", test2, data, semigroup, grid, noise, start=start).values
            vals["Qv1"] = integ(v1, qh)
        if v2 is not None:
            q = apply_Q_relaxed(solution, "Q", test1, data, semigroup, grid, noise, start=start).values
            vals["Qv2"] = integ(q, v2)
    else:
        if v1 is not None:
            vals["Qv1"] = integ(np.einsum("pkiab,pkib->pka", Qv, v1), x2)
        if v2 is not None:
            vals["Qv2"] = integ(x1, np.einsum("pkiba,pkib->pka", Qv, v2))
    lhs = vals["P_T"] - vals["F"]
    rhs = sum(vals[n] for n in names[2:])
    r = lhs - rhs
    scale = sum(abs(v) for v in vals.values())
    return {"terms": vals, "residual": r, "scale": scale,
            "normalized": abs(r) / scale if scale > 0 else abs(r)}


def random_operator_tests(grid, noise, m, n_pairs, seed=0, with_v=True, with_u=True):
    """Random adapted test pairs (xi, u, v) built from the Brownian path."""
    rng = np.random.default_rng(seed)
    W = noise.W
    d = noise.d
    pairs = []
    for _ in range(n_pairs):
        pair = []
        for _ in range(2):
            a0, a1 = rng.uniform(-1, 1, (2, m))
            t = {"xi": a0 + a1 * W[:, 0, :1]}
            if with_u:
                b0, b1 = rng.uniform(-1, 1, (2, m))
                t["u"] = b0 + b1 * W[:, :, :1]
            if with_v:
                c0, c1 = rng.uniform(-1, 1, (2, d, m))
                t["v"] = c0 + c1 * np.sin(W)[:, :, :, None]
            pair.append(t)
        pairs.append(tuple(pair))
    return pairs


def apply_Q_relaxed(solution, which, triple, data, semigroup, grid, noise, start=0):
    """Q^{(t)}(xi,u,v)(s) = Q(s) x(s)  or  Qhat^{(t)}(xi,u,v)(s) = Q(s)^T x(s),

    with x the solution of the linear forward equation driven by the full
    triple on the same noise.  Output shape (P, N+1, d, m), zero before t.
    """
    if which not in ("Q", "Qhat"):
        raise ValueError("which must be 'Q' or 'Qhat'")
    if not 0 <= start <= grid.steps:
        raise ValueError("inconsistent start time")
    x = simulate_linear(semigroup, grid, noise, triple["xi"], J=data.J, K=data.K, u=triple.get("u"),
                        v=triple.get("v"), start=start).values
    Qv = solution.Q.values
    spec = "pkiab,pkb->pkia" if which == "Q" else "pkiba,pkb->pkia"
    out = np.einsum(spec, Qv, x)
    out[:, :start] = 0.0
    return AdaptedProcess(grid, out, {"which": which, "start": start})


def adjoint_compatibility(solution, v, data, semigroup, grid, noise):
    """Pointwise check  Q(0,0,v)^* = Qhat(0,0,v)  on the matrices, plus the pairing form."""
    Qv = solution.Q.values
    mat_gap = float(np.max(np.abs(np.swapaxes(Qv, -1, -2) - np.einsum("pkiab->pkiba", Qv))))
    zero = {"xi": np.zeros(solution.P.values.shape[-1]), "v": v}
    q = apply_Q_relaxed(solution, "Q", zero, data, semigroup, grid, noise).values
    qh = apply_Q_relaxed(solution, "Qhat", zero, data, semigroup, grid, noise).values
    x = simulate_linear(semigroup, grid, noise, zero["xi"], J=data.J, K=data.K, v=v).values
    vv = _process(v, *x.shape[:2], (noise.d, x.shape[-1]))
    # <Q x, v> against <x, Q^T v>: both sides of the adjoint relation
    lhs = pairing(q, vv, dt=grid.dt)
    rhs = pairing(x[:, :, None, :].repeat(noise.d, axis=2), np.einsum("pkiba,pkib->pkia", Qv, vv), dt=grid.dt)
    lhs_h = pairing(qh, vv, dt=grid.dt)
    rhs_h = pairing(x[:, :, None, :].repeat(noise.d, axis=2), np.einsum("pkiab,pkib->pkia", Qv, vv), dt=grid.dt)
    return {"matrix_gap": mat_gap, "pairing_gap": abs(lhs - rhs), "pairing_gap_hat": abs(lhs_h - rhs_h)}


# -- Galerkin ---------------------------------------------------------------

def _project_data(data, rank):
    def proj(C):
        if C is None or callable(C):
            return C
        return project(rank, C)

    return OperatorBseeData(project(rank, data.P_T), proj(data.F), data.J, data.K, f"{data.label}@{rank}")


def sup_frobenius_error(a, b):
    """(E sup_t |a(t) - b(t)|_F^2)^(1/2)."""
    diff = np.linalg.norm(a - b, axis=(-2, -1))
    return float(np.sqrt(np.mean(np.max(diff ** 2, axis=1))))


def galerkin_sequence(data, ranks, semigroup, grid, noise, basis, full=None):
    ranks = list(ranks)
    m = data.m
    if any(r > m or r < 0 for r in ranks) or ranks != sorted(ranks):
        raise ValueError(f"ranks must be increasing and <= {m}")
    full = full or solve_operator_bsee(data, semigroup, grid, noise, basis)
    rows = []
    sols = []
    for r in ranks:
        sol = full if r == m else solve_operator_bsee(_project_data(data, r), semigroup, grid, noise, basis)
        sols.append(sol)
        rows.append({"rank": r, "error": sup_frobenius_error(sol.P.values, full.P.values)})
    return sols, rows


def diagonal_tail(rank, m):
    j = np.arange(rank + 1, m + 1)
    return float(np.sqrt(np.sum(4.0 ** (-j))))


# -- partition machinery ------------------------------------------------------

@dataclass
class PartitionElement:
    """sum_i 1_[t_i, t_i+1)(.) U(., t_i) h_i  on the n-block partition."""

    n: int
    starts: np.ndarray
    h: list
    values: np.ndarray  # flowed process (P, N+1, m)
    step_values: np.ndarray  # unflowed tilde v (P, N+1, m)


def _flowed(semigroup, grid, noise, J, K, starts, hs):
    Pn, m = hs[0].shape
    out = np.zeros((Pn, grid.steps + 1, m))
    for i, s0 in enumerate(starts[:-1]):
        s1 = starts[i + 1]
        seg = flow_operator(semigroup, grid, noise, hs[i], J=J, K=K, start=s0, stop=s1).values
        out[:, s0:s1] = seg[:, s0:s1]
    return out


def partition_project(v, n, semigroup, grid, noise, J=None, K=None):
    """Flow the block values of a step process v (P, N+1, m) on the n-block partition."""
    v = np.asarray(v, dtype=float)
    starts = grid.partition(n)
    for i in range(n):
        blk = v[:, starts[i]:starts[i + 1]]
        if not np.all(blk == blk[:, :1]):
            raise ValueError(f"v is not constant on block {i} of the {n}-block partition")
    hs = [v[:, s].copy() for s in starts[:-1]]
    flowed = _flowed(semigroup, grid, noise, J, K, starts, hs)
    step = np.zeros_like(flowed)
    for i in range(n):
        step[:, starts[i]:starts[i + 1]] = hs[i][:, None, :]
    err = mixed_norm(flowed - step, p_omega=4.0, r_time=2.0, dt=grid.dt)
    return PartitionElement(n, starts, hs, flowed, step), err


def build_Qn(solution, element, semigroup, grid, noise, J=None, K=None, hat=False):
    """(Q^n v)(t) = Q(t) U(t, t_i) h_i on each block (d = 1); Qhat^n uses Q^T."""
    if solution.Q.values.shape[2] != 1:
        raise ValueError("the partition operators are defined for d = 1")
    if grid.steps % element.n:
        raise ValueError("element does not live on a partition of this grid")
    flowed = _flowed(semigroup, grid, noise, J, K, element.starts, element.h)
    Q0 = solution.Q.values[:, :, 0]
    spec = "pkba,pkb->pka" if hat else "pkab,pkb->pka"
    return np.einsum(spec, Q0, flowed)


def Qn_bound_ratio(Qn_v, element, dt):
    """|Q^n v|_{L^2_t L^{4/3}_w} / |tilde v|_{L^2_t L^4_w}."""
    num = mixed_norm(Qn_v, p_omega=4.0 / 3.0, r_time=2.0, dt=dt)
    den = mixed_norm(element.step_values, p_omega=4.0, r_time=2.0, dt=dt)
    return num / den if den > 0 else 0.0


def partition_identity_check(solution, data, semigroup, grid, noise, triple1, triple2, v1, v2):
    """Both sides of

      E int <v1, Qhat(xi2,u2,v2)> + E int <Q(xi1,u1,v1), v2>
        = E int <Q^n v1, x2> + <x1, Qhat^n v2>

    with v1, v2 partition elements used as the diffusion forcings (d = 1).
    """
    t1 = dict(triple1, v=v1.values[:, :, None, :])
    t2 = dict(triple2, v=v2.values[:, :, None, :])
    qh = apply_Q_relaxed(solution, "Qhat", t2, data, semigroup, grid, noise).values[:, :, 0]
    q = apply_Q_relaxed(solution, "Q", t1, data, semigroup, grid, noise).values[:, :, 0]
    lhs_terms = [pairing(v1.values, qh, dt=grid.dt), pairing(q, v2.values, dt=grid.dt)]
    x1 = simulate_linear(semigroup, grid, noise, t1["xi"], J=data.J, K=data.K, u=t1.get("u"), v=t1["v"]).values
    x2 = simulate_linear(semigroup, grid, noise, t2["xi"], J=data.J, K=data.K, u=t2.get("u"), v=t2["v"]).values
    Qn1 = build_Qn(solution, v1, semigroup, grid, noise, data.J, data.K)
    Qh2 = build_Qn(solution, v2, semigroup, grid, noise, data.J, data.K, hat=True)
    rhs_terms = [pairing(Qn1, x2, dt=grid.dt), pairing(x1, Qh2, dt=grid.dt)]
    lhs, rhs = sum(lhs_terms), sum(rhs_terms)
    scale = sum(abs(t) for t in lhs_terms + rhs_terms)
    return {"lhs": lhs, "rhs": rhs, "discrepancy": abs(lhs - rhs),
            "normalized": abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs),
            "Qn_v1": Qn1, "Qhat_n_v2": Qh2}
