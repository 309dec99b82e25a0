"""Vector-valued backward equation  dy = -A^T y dt + f(t, y, Y) dt + Y dw,  y(T) = y_T.

Two independent solvers are provided:

* ``solve_backward_regression``: least-squares Monte Carlo on the mild
  backward recursion (the oracle);
* ``transposition_solve``: the duality construction, where y and Y are the
  representatives of the functional  l(eta, psi1, psi2) = E<z(T), y_T> - E int <z, f>
  over a finite family of block test triples.

Shapes: y is (P, N+1, m), Y is (P, N+1, d, m).  Y at the last node is zero.
"""

from dataclasses import dataclass, field

import numpy as np

from .forward import simulate_mild
from .regression import Projector, RankDeficient
from .stochastic import AdaptedProcess, expect_inner, lp_norm, pairing


@dataclass
class BseeData:
    y_T: np.ndarray
    f: object = None  # callable f(k, y, Y) -> (P, m), or None for f = 0
    lipschitz: float = 0.0
    p: float = 2.0
    label: str = ""

    def driver(self, k, y, Y):
        if self.f is None:
            return np.zeros_like(y)
        return np.asarray(self.f(k, y, Y), dtype=float)

    def scaled(self, c):
        """Data with y_T and f multiplied by c (for linear-in-data drivers with f = f0)."""
        f = None if self.f is None else (lambda k, y, Y, _f=self.f: c * _f(k, y / c, Y / c))
        return BseeData(c * self.y_T, f, self.lipschitz, self.p, self.label)


@dataclass
class BseeSolution:
    y: AdaptedProcess
    Y: AdaptedProcess
    start: int = 0
    report: dict = field(default_factory=dict)


class NonLipschitzDriver(ValueError):
    pass


def check_lipschitz(data, n_samples=64, seed=0, steps=(0,), d=1):
    """Sampled check of |f(y1,Y1) - f(y2,Y2)| <= C_L (|y1-y2| + |Y1-Y2|)."""
    if data.f is None or data.lipschitz <= 0:
        return {"checked": False}
    m = data.y_T.shape[1]
    P = data.y_T.shape[0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in steps:
        for _ in range(4):
            y1, y2 = rng.standard_normal((2, P, m))
            Y1, Y2 = rng.standard_normal((2, P, d, m))
            df = np.linalg.norm(data.driver(k, y1, Y1) - data.driver(k, y2, Y2), axis=1)
            dx = np.linalg.norm(y1 - y2, axis=1) + np.linalg.norm((Y1 - Y2).reshape(P, -1), axis=1)
            ratio = float(np.max(df / dx))
            worst = max(worst, ratio)
            if ratio > data.lipschitz * (1 + 1e-9):
                raise NonLipschitzDriver(f"driver violates declared C_L={data.lipschitz}: "
                                         f"sampled ratio {ratio:.4g} at step {k}")
    return {"checked": True, "max_ratio": worst}


def _projector(basis, k, cache):
    pr = cache.get(k)
    if pr is None:
        try:
            pr = Projector(basis.features(k), step=k, drop_collinear=getattr(basis, "drop_collinear", False))
        except RankDeficient as exc:
            exc.step = k
            raise
        cache[k] = pr
    return pr


def solve_backward_regression(data, semigroup, grid, noise, basis, start=0, implicit=False,
                              picard_max=50, picard_tol=1e-10, projectors=None, control_variate=True):
    """Backward sweep

        v = S(dt)^T y_{k+1},  yhat = E_k[v],
        Y_k = E_k[(v - yhat) dw] / dt,
        y_k = yhat - dt f(t_k, yhat, Y_k)     (explicit)

    with E_k the regression onto ``basis.features(k)``.  Subtracting yhat
    before multiplying by dw does not change the conditional expectation
    (E_k[yhat dw] = 0) and is switched off by ``control_variate=False``.
    """
    y_T = np.asarray(data.y_T, dtype=float)
    P, m = y_T.shape
    d, dt, N = noise.d, grid.dt, grid.steps
    if P != noise.n_paths:
        raise ValueError("terminal datum and noise have different path counts")
    if data.f is not None and data.lipschitz > 0:
        check_lipschitz(data, d=d)
    S = semigroup(dt)
    y = np.zeros((P, N + 1, m))
    Y = np.zeros((P, N + 1, d, m))
    y[:, N] = y_T
    cache = {} if projectors is None else projectors
    conds = []
    picard_iters = []
    for k in range(N - 1, start - 1, -1):
        pr = _projector(basis, k, cache)
        conds.append(pr.cond)
        v = y[:, k + 1] @ S
        yhat = pr(v)
        dw = noise.increments[:, k]
        resid = v - yhat if control_variate else v
        Y[:, k] = pr(resid[:, None, :] * dw[:, :, None]) / dt
        if data.f is None:
            y[:, k] = yhat
            continue
        yk = yhat - dt * data.driver(k, yhat, Y[:, k])
        if implicit:
            it = 0
            for it in range(1, picard_max + 1):
                nxt = yhat - dt * data.driver(k, yk, Y[:, k])
                inc = float(np.max(np.abs(nxt - yk)))
                yk = nxt
                if inc <= picard_tol:
                    break
            picard_iters.append(it)
        y[:, k] = yk
    rep = {"scheme": "regression", "implicit": implicit, "max_condition": float(max(conds, default=1.0)),
           "basis_degree": getattr(basis, "degree", None), "steps": N, "n_paths": P}
    if implicit:
        rep["max_picard_iterations"] = int(max(picard_iters, default=0))
    return BseeSolution(AdaptedProcess(grid, y), AdaptedProcess(grid, Y), start, rep)


# -- transposition construction --------------------------------------------

def _driver_process(data, y, Y, start, N):
    fv = np.zeros_like(y)
    if data.f is None:
        return fv
    for k in range(start, N):
        fv[:, k] = data.driver(k, y[:, k], Y[:, k])
    return fv


def _adjoint_values(y_T, fv, S, dt, start, N):
    """G_N = y_T, G_k = S^T G_{k+1} - dt f_k, pathwise (no conditioning)."""
    G = np.zeros_like(fv)
    G[:, N] = y_T
    for k in range(N - 1, start - 1, -1):
        G[:, k] = G[:, k + 1] @ S - dt * fv[:, k]
    return G


def _functional_forward(semigroup, grid, noise, y_T, fv, start, eta=None, psi1=None, psi2=None):
    """l = E<z(T), y_T> - E sum_k dt <z_k, f_k> with z simulated from the test."""
    P, m = y_T.shape
    eta = np.zeros((P, m)) if eta is None else eta
    z = simulate_mild(semigroup, grid, noise, eta, psi1=psi1, psi2=psi2, start=start).values
    return expect_inner(z[:, -1], y_T) - pairing(z, fv, dt=grid.dt, start=start, stop=grid.steps)


def _solve_gram(design, rhs):
    Pn = design.shape[0]
    gram = design.T @ design / Pn
    coef, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
    return design @ coef, float(np.linalg.cond(gram))


def transposition_solve(data, semigroup, grid, noise, basis, start=0, method="adjoint",
                        picard_max=20, picard_tol=1e-6, control_variate=True):
    """Duality solution against the block test family

        eta  = phi_j(t_start) e_l                 -> y(t_start)
        psi1 = 1_{[t_k, t_k+1)} phi_j e_l         -> y(t_k), k > start
        psi2 = 1_{[t_k, t_k+1)} phi_j e_l e_i     -> Y_i(t_k)

    ``method='adjoint'`` evaluates the functional through the pathwise
    backward values G; ``method='forward'`` simulates every test equation
    and solves the Gram system (slow; for small instances).

    With ``control_variate`` the psi2 functionals are centred by the
    (mean-zero) pairing of dw with the psi1 representative, which leaves
    their expectation unchanged and removes most of the Monte Carlo noise.
    """
    if method not in ("adjoint", "forward"):
        raise ValueError(f"unknown method {method!r}")
    y_T = np.asarray(data.y_T, dtype=float)
    P, m = y_T.shape
    d, dt, N = noise.d, grid.dt, grid.steps
    S = semigroup(dt)
    y = np.zeros((P, N + 1, m))
    Y = np.zeros((P, N + 1, d, m))
    y[:, N] = y_T
    cache = {}
    iters, inc = 0, 0.0
    n_tests = 0
    gram_cond = 1.0
    for iters in range(1, (picard_max if data.f is not None else 1) + 1):
        fv = _driver_process(data, y, Y, start, N)
        y_new = np.zeros_like(y)
        Y_new = np.zeros_like(Y)
        y_new[:, N] = y_T
        if method == "adjoint":
            G = _adjoint_values(y_T, fv, S, dt, start, N)
            for k in range(start, N):
                pr = _projector(basis, k, cache)
                v = G[:, k + 1] @ S
                vhat = pr(v)
                y_new[:, k] = pr(G[:, k]) if k == start else vhat
                dw = noise.increments[:, k]
                resid = v - vhat if control_variate else v
                Y_new[:, k] = pr(resid[:, None, :] * dw[:, :, None]) / dt
            n_tests = (N - start) * (d + 1) * m
        else:
            n_tests = 0
            for k in range(start, N):
                pr = _projector(basis, k, cache)
                design = _design(pr, basis.features(k))
                nf = design.shape[1]
                rhs_v = np.zeros((nf, m))
                rhs_eta = np.zeros((nf, m))
                rhs_Y = np.zeros((nf, d, m))
                for j in range(nf):
                    for l in range(m):
                        direction = np.zeros((P, m))
                        direction[:, l] = design[:, j]
                        if k == start:
                            rhs_eta[j, l] = _functional_forward(semigroup, grid, noise, y_T, fv, start,
                                                                eta=direction)
                            n_tests += 1
                        psi1 = np.zeros((P, N + 1, m))
                        psi1[:, k] = direction
                        rhs_v[j, l] = _functional_forward(semigroup, grid, noise, y_T, fv, start,
                                                          psi1=psi1) / dt
                        for i in range(d):
                            psi2 = np.zeros((P, N + 1, d, m))
                            psi2[:, k, i] = direction
                            rhs_Y[j, i, l] = _functional_forward(semigroup, grid, noise, y_T, fv, start,
                                                                 psi2=psi2) / dt
                        n_tests += 1 + d
                vhat, c1 = _solve_gram(design, rhs_v)
                y_new[:, k] = _solve_gram(design, rhs_eta)[0] if k == start else vhat
                if control_variate:
                    dw = noise.increments[:, k]
                    rhs_Y -= np.einsum("pj,pi,pl->jil", design, dw, vhat) / P / dt
                fitted, c2 = _solve_gram(design, rhs_Y.reshape(nf, d * m))
                Y_new[:, k] = fitted.reshape(P, d, m)
                gram_cond = max(gram_cond, c1, c2)
        inc = float(np.sqrt(np.mean(np.sum((y_new - y) ** 2, axis=2)[:, start:N].sum(axis=1) * dt)
                            + np.mean(np.sum((Y_new - Y) ** 2, axis=(2, 3))[:, start:N].sum(axis=1) * dt)))
        y, Y = y_new, Y_new
        if data.f is None or inc <= picard_tol:
            break
    rep = {"scheme": "transposition", "method": method, "picard_iterations": iters,
           "picard_increment": inc, "converged": bool(data.f is None or inc <= picard_tol),
           "n_tests": n_tests, "basis_degree": getattr(basis, "degree", None),
           "max_condition": float(max((p.cond for p in cache.values()), default=1.0)),
           "gram_condition": gram_cond}
    return BseeSolution(AdaptedProcess(grid, y), AdaptedProcess(grid, Y), start, rep)


def _design(pr, features):
    """The non-degenerate feature columns (plus a constant) used as test functions."""
    F = np.asarray(features, dtype=float)
    cols = [np.ones((F.shape[0], 1)), F[:, pr.kept]]
    return np.concatenate(cols, axis=1)


# -- checks ----------------------------------------------------------------

def make_random_tests(grid, noise, m, n_tests, seed=0, max_start_fraction=0.5):
    """Random adapted test triples built from the Brownian path.

    eta = a0 + a1 W(t);  psi1(s) = b0 + b1 W(s);  psi2_i(s) = c0 + c1 cos(W_i(s)).
    Coefficient vectors have positive-mean entries so the test functions
    have non-trivial expectations.
    """
    rng = np.random.default_rng(seed)
    W = noise.W
    d = noise.d
    N = grid.steps
    tests = []
    for _ in range(n_tests):
        start = int(rng.integers(0, max(1, int(N * max_start_fraction)) + 1))
        a0, a1, b0, b1 = (rng.uniform(0.2, 1.0, m) for _ in range(4))
        c0, c1 = rng.uniform(0.2, 1.0, (2, d, m))
        eta = a0 + a1 * W[:, start, :1]
        psi1 = b0 + b1 * W[:, :, :1]
        psi1[:, :start] = 0.0
        psi2 = c0 + c1 * np.cos(W)[:, :, :, None]
        psi2[:, :start] = 0.0
        tests.append({"start": start, "eta": eta, "psi1": psi1, "psi2": psi2})
    return tests


def duality_residual(candidate, data, tests, semigroup, grid, noise):
    """Residual of  E<z(T),y_T> - E int <z,f> = E<eta,y(t)> + E int <psi1,y> + E int <psi2,Y>."""
    y = candidate.y.values
    Y = candidate.Y.values
    if candidate.y.grid != grid:
        raise ValueError("candidate and test grids differ")
    N = grid.steps
    fv = _driver_process(data, y, Y, 0, N)
    rows = []
    for idx, t in enumerate(tests):
        s = t["start"]
        z = simulate_mild(semigroup, grid, noise, t["eta"], psi1=t["psi1"], psi2=t["psi2"], start=s).values
        terms = [expect_inner(z[:, N], data.y_T),
                 pairing(z, fv, dt=grid.dt, start=s, stop=N),
                 expect_inner(t["eta"], y[:, s]),
                 pairing(t["psi1"], y, dt=grid.dt, start=s, stop=N),
                 pairing(t["psi2"], Y, dt=grid.dt, start=s, stop=N)]
        r = terms[0] - terms[1] - terms[2] - terms[3] - terms[4]
        scale = sum(abs(v) for v in terms)
        rows.append({"test": idx, "start": s, "residual": r, "scale": scale,
                     "normalized": abs(r) / scale if scale > 0 else abs(r),
                     "terms": terms})
    norm = np.array([r["normalized"] for r in rows])
    return {"rows": rows, "max": float(norm.max()), "rms": float(np.sqrt(np.mean(norm ** 2)))}


def shifted(solution, c):
    """Candidate with y shifted by the constant c (a corrupted solution)."""
    return BseeSolution(AdaptedProcess(solution.y.grid, solution.y.values + c), solution.Y,
                        solution.start, dict(solution.report, corrupted=f"shift {c}"))


def process_error(sol, y_ref, Y_ref, start=None, stop=None):
    """(E int |y - y_ref|^2 + |Y - Y_ref|^2 dt)^(1/2) over left endpoints."""
    grid = sol.y.grid
    start = sol.start if start is None else start
    stop = grid.steps if stop is None else stop
    dy = sol.y.values - y_ref
    dY = sol.Y.values - Y_ref
    e2 = (np.sum(dy[:, start:stop] ** 2, axis=2).sum(axis=1)
          + np.sum(dY[:, start:stop] ** 2, axis=(2, 3)).sum(axis=1)) * grid.dt
    return float(np.sqrt(np.mean(e2)))


def solution_distance(a, b, start, stop=None):
    return process_error(a, b.y.values, b.Y.values, start=start, stop=stop)


def time_consistency_check(data, semigroup, grid, noise, basis, i1, i2, **kw):
    if not 0 <= i1 <= i2 <= grid.steps:
        raise ValueError("need 0 <= t1 <= t2 <= T on the grid")
    s1 = transposition_solve(data, semigroup, grid, noise, basis, start=i1, **kw)
    s2 = transposition_solve(data, semigroup, grid, noise, basis, start=i2, **kw)
    dist = solution_distance(s1, s2, start=i2)
    identical = bool(np.array_equal(s1.y.values[:, i2:], s2.y.values[:, i2:])
                     and np.array_equal(s1.Y.values[:, i2:], s2.Y.values[:, i2:]))
    return {"t1": grid.time(i1), "t2": grid.time(i2), "l2_discrepancy": dist,
            "bit_identical": identical, "first": s1, "second": s2}


def wellposedness_bound_check(data, solution, p=None):
    """Ratio  (|y|_{sup L^p} + |Y|_{L^p(L^2_t)}) / (|f(.,0,0)|_{L^1_t L^p} + |y_T|_{L^p})."""
    p = data.p if p is None else p
    grid = solution.y.grid
    y, Y = solution.y, solution.Y
    lhs = lp_norm(y, p, "sup_t") + lp_norm(Y, p, "integral_t")
    P, m = data.y_T.shape
    d = Y.values.shape[2]
    f0 = 0.0
    if data.f is not None:
        zero_y, zero_Y = np.zeros((P, m)), np.zeros((P, d, m))
        for k in range(solution.start, grid.steps):
            fk = np.linalg.norm(data.driver(k, zero_y, zero_Y), axis=1)
            f0 += float(np.mean(fk ** p) ** (1.0 / p)) * grid.dt
    yT = float(np.mean(np.linalg.norm(data.y_T, axis=1) ** p) ** (1.0 / p))
    rhs = f0 + yT
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
    return {"lhs": lhs, "rhs": rhs, "ratio": float(ratio), "p": p}
