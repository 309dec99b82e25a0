"""Spike-variation maximum principle on controlled evolution equations

    dx = [A x + a(t,x,u)] dt + b(t,x,u) dw,     J(u) = E[ int g dt + h(x(T)) ].

Callbacks are vectorised over paths: x is (P, m), u is (P, k).  Shapes:

    a (P,m)   b (P,d,m)   g (P,)   h (P,)
    a_x (P,m,m)  b_x (P,d,m,m)  g_x (P,m)  h_x (P,m)
    a_xx (P,m,m,m)  [c,i,j] = d2 a_c / dx_i dx_j,  b_xx (P,d,m,m,m),  g_xx, h_xx (P,m,m)
"""

from dataclasses import dataclass, field

import numpy as np

from .forward import ControlValueError, march, simulate_controlled
from .model_space import Semigroup
from .operator_bsee import OperatorBseeData, apply_Q_relaxed, solve_operator_bsee
from .stochastic import expect_inner, mean_and_se, pairing, sup_moment
from .vector_bsee import BseeData, solve_backward_regression


# -- problem definition --------------------------------------------------------

@dataclass
class ControlSet:
    kind: str  # "finite" | "box"
    values: np.ndarray = None  # finite: (L, k)
    lower: np.ndarray = None
    upper: np.ndarray = None
    lattice_size: int = 21

    def __post_init__(self):
        if self.kind == "finite":
            self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        elif self.kind == "box":
            self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
            self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if np.any(self.lower > self.upper):
                raise ValueError("box with lower > upper")
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")

    @property
    def dim(self):
        return self.values.shape[1] if self.kind == "finite" else self.lower.size

    def lattice(self):
        """Finite sets: all members.  Boxes: a tensor lattice (ties resolve to lowest index)."""
        if self.kind == "finite":
            return self.values.copy()
        axes = [np.linspace(lo, hi, self.lattice_size) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def contains(self, u, tol=1e-12):
        u = np.asarray(u, dtype=float).reshape(-1, self.dim)
        if self.kind == "box":
            return np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=1)
        dist = np.min(np.max(np.abs(u[:, None, :] - self.values[None]), axis=2), axis=1)
        return dist <= tol

    def check(self, u):
        if u is None:
            return
        ok = self.contains(u)
        if not np.all(ok):
            bad = np.asarray(u).reshape(-1, self.dim)[np.argmin(ok)]
            raise ControlValueError(f"control value {bad.tolist()} lies outside U")


@dataclass
class ControlProblem:
    name: str
    A: np.ndarray
    d: int
    control_dim: int
    a: object
    b: object
    g: object
    h: object
    a_x: object
    b_x: object
    g_x: object
    h_x: object
    a_xx: object
    b_xx: object
    g_xx: object
    h_xx: object
    controls: ControlSet
    lipschitz: float
    x0: np.ndarray
    T: float = 1.0
    sample_radius: float = 2.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        self.semigroup = Semigroup(self.A)

    @property
    def m(self):
        return self.A.shape[0]


def lq_problem(A, B, C, D, M, N, G, x0, lower, upper, lattice_size=21, T=1.0, lipschitz=None,
               sample_radius=2.0, name="lq"):
    """a = B u, b_i = C_i x + D_i u, g = (<Mx,x> + <Nu,u>)/2, h = <Gx,x>/2."""
    A, B, M, N, G = (np.asarray(z, dtype=float) for z in (A, B, M, N, G))
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    m, k = B.shape
    d = C.shape[0]
    if lipschitz is None:
        r = sample_radius
        umax = float(np.max(np.abs(np.concatenate([np.atleast_1d(lower), np.atleast_1d(upper)]))))
        cands = [np.linalg.norm(B, 2) * umax * np.sqrt(k),
                 np.sqrt(sum(np.linalg.norm(Ci, 2) ** 2 for Ci in C)),
                 np.sqrt(sum(np.linalg.norm(Di, 2) ** 2 for Di in D)) * umax * np.sqrt(k),
                 np.linalg.norm(M, 2) * r, np.linalg.norm(G, 2) * r,
                 0.5 * np.linalg.norm(N, 2) * umax ** 2 * k, np.linalg.norm(M, 2), np.linalg.norm(G, 2)]
        lipschitz = 1.05 * float(max(cands))

    def zeros(P, *shape):
        return np.zeros((P,) + shape)

    prob = ControlProblem(
        name=name, A=A, d=d, control_dim=k,
        a=lambda t, x, u: u @ B.T,
        b=lambda t, x, u: np.einsum("iab,pb->pia", C, x) + np.einsum("iak,pk->pia", D, u),
        g=lambda t, x, u: 0.5 * (np.einsum("pa,ab,pb->p", x, M, x) + np.einsum("pa,ab,pb->p", u, N, u)),
        h=lambda x: 0.5 * np.einsum("pa,ab,pb->p", x, G, x),
        a_x=lambda t, x, u: zeros(x.shape[0], m, m),
        b_x=lambda t, x, u: np.broadcast_to(C, (x.shape[0], d, m, m)).copy(),
        g_x=lambda t, x, u: x @ (0.5 * (M + M.T)),
        h_x=lambda x: x @ (0.5 * (G + G.T)),
        a_xx=lambda t, x, u: zeros(x.shape[0], m, m, m),
        b_xx=lambda t, x, u: zeros(x.shape[0], d, m, m, m),
        g_xx=lambda t, x, u: np.broadcast_to(0.5 * (M + M.T), (x.shape[0], m, m)).copy(),
        h_xx=lambda x: np.broadcast_to(0.5 * (G + G.T), (x.shape[0], m, m)).copy(),
        controls=ControlSet("box", lower=lower, upper=upper, lattice_size=lattice_size),
        lipschitz=lipschitz, x0=x0, T=T, sample_radius=sample_radius,
        meta={"lq": {"A": A, "B": B, "C": C, "D": D, "M": M, "N": N, "G": G, "x0": np.asarray(x0, float),
                     "T": T}})
    return prob


# -- Hamiltonian, cost, spikes ---------------------------------------------------

def hamiltonian(problem, t, x, u, k1, k2):
    """<k1, a> + <k2, b> - g, per path."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    problem.controls.check(u)
    P = x.shape[0]
    k1 = np.broadcast_to(k1, (P, problem.m))
    k2 = np.broadcast_to(k2, (P, problem.d, problem.m))
    return (np.einsum("pa,pa->p", k1, problem.a(t, x, u))
            + np.einsum("pia,pia->p", k2, problem.b(t, x, u)) - problem.g(t, x, u))


def hamiltonian_x(problem, t, x, u, k1, k2):
    """Gradient of the Hamiltonian in x from the derivative callbacks."""
    return (np.einsum("pc,pca->pa", k1, problem.a_x(t, x, u))
            + np.einsum("pic,pica->pa", k2, problem.b_x(t, x, u)) - problem.g_x(t, x, u))


def hamiltonian_xx(problem, t, x, u, k1, k2):
    return (np.einsum("pc,pcij->pij", k1, problem.a_xx(t, x, u))
            + np.einsum("pic,picjl->pjl", k2, problem.b_xx(t, x, u)) - problem.g_xx(t, x, u))


def cost_samples(problem, x, u, grid):
    """Per-path  sum_k g(t_k, x_k, u_k) dt + h(x_N)."""
    X = x.values if hasattr(x, "values") else x
    acc = np.zeros(X.shape[0])
    for k in range(grid.steps):
        acc += problem.g(grid.time(k), X[:, k], u[:, k]) * grid.dt
    return acc + problem.h(X[:, -1])


def evaluate_cost(problem, control, grid, noise, **kw):
    x, u = simulate_controlled(problem, control, grid, noise, **kw)
    s = cost_samples(problem, x, u, grid)
    mean, se = mean_and_se(s)
    return {"cost": mean, "se": se, "samples": s, "x": x, "u": u}


@dataclass
class SpikeSpec:
    tau: float
    eps: float
    u: object  # (k,) constant or (P, N, k) array


def spike_window(spike, grid):
    """Step indices [i0, i1) of E_eps = [tau, tau + eps)."""
    if spike.eps < 0 or spike.tau < grid.t_start or spike.tau + spike.eps > grid.t_end + 1e-12:
        raise ValueError("spike interval must lie inside [0, T]")
    i0 = grid.index(spike.tau)
    i1 = grid.index(spike.tau + spike.eps)
    return i0, i1


def spike_control(ubar, spike, grid):
    i0, i1 = spike_window(spike, grid)
    out = np.array(ubar, dtype=float, copy=True)
    alt = np.asarray(spike.u, dtype=float)
    if alt.ndim == 1:
        out[:, i0:i1] = alt
    else:
        out[:, i0:i1] = alt[:, i0:i1]
    return out


def indicator(spike, grid):
    i0, i1 = spike_window(spike, grid)
    chi = np.zeros(grid.steps + 1)
    chi[i0:i1] = 1.0
    return chi


# -- variations -----------------------------------------------------------------

class PerturbationBundle:
    """Frozen coefficients along (xbar, ubar) and the replacement control u."""

    def __init__(self, problem, grid, xbar, ubar, u_alt):
        self.problem = problem
        self.grid = grid
        self.xbar = xbar.values if hasattr(xbar, "values") else np.asarray(xbar)
        self.ubar = np.asarray(ubar, dtype=float)
        P = self.ubar.shape[0]
        alt = np.asarray(u_alt, dtype=float)
        self.u_alt = np.broadcast_to(alt, (P, grid.steps, problem.control_dim)) if alt.ndim == 1 else alt

    def _args(self, k, alt=False):
        k = min(k, self.grid.steps - 1)
        return self.grid.time(k), self.xbar[:, k], (self.u_alt if alt else self.ubar)[:, k]

    def a1(self, k):
        return self.problem.a_x(*self._args(k))

    def b1(self, k):
        return self.problem.b_x(*self._args(k))

    def g1(self, k):
        return self.problem.g_x(*self._args(k))

    def a11(self, k):
        return self.problem.a_xx(*self._args(k))

    def b11(self, k):
        return self.problem.b_xx(*self._args(k))

    def g11(self, k):
        return self.problem.g_xx(*self._args(k))

    def da(self, k):
        return self.problem.a(*self._args(k, True)) - self.problem.a(*self._args(k))

    def db(self, k):
        return self.problem.b(*self._args(k, True)) - self.problem.b(*self._args(k))

    def dg(self, k):
        return self.problem.g(*self._args(k, True)) - self.problem.g(*self._args(k))

    def db1(self, k):
        return self.problem.b_x(*self._args(k, True)) - self.problem.b_x(*self._args(k))


def first_variation(bundle, spike, grid, noise, scale=1.0, **kw):
    """dx2 = (A + a1) x2 dt + (b1 x2 + chi delta_b) dw,  x2(0) = 0."""
    chi = indicator(spike, grid)
    m = bundle.problem.m
    return march(bundle.problem.semigroup, grid, noise, np.zeros(m),
                 J=lambda k, x: bundle.a1(k), K=lambda k, x: bundle.b1(k),
                 v=lambda k, x: scale * chi[k] * bundle.db(k), **kw)


def _quad(T3, x):
    """T(x, x) for a bilinear map stored as [..., c, i, j]."""
    return np.einsum("p...cij,pi,pj->p...c", T3, x, x)


def second_variation(bundle, spike, x2, grid, noise, **kw):
    """dx3 = [(A + a1) x3 + chi da + a11(x2,x2)/2] dt + [b1 x3 + chi db1 x2 + b11(x2,x2)/2] dw."""
    chi = indicator(spike, grid)
    X2 = x2.values
    m = bundle.problem.m

    def u(k, x):
        return chi[k] * bundle.da(k) + 0.5 * _quad(bundle.a11(k), X2[:, k])

    def v(k, x):
        return (chi[k] * np.einsum("piab,pb->pia", bundle.db1(k), X2[:, k])
                + 0.5 * _quad(bundle.b11(k), X2[:, k]))

    return march(bundle.problem.semigroup, grid, noise, np.zeros(m),
                 J=lambda k, x: bundle.a1(k), K=lambda k, x: bundle.b1(k), u=u, v=v, **kw)


def fit_slope(xs, ys):
    xs, ys = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(xs, ys, 1)[0])


# -- adjoints --------------------------------------------------------------------

def first_adjoint_data(problem, grid, xbar, ubar, lipschitz=0.0):
    X = xbar.values if hasattr(xbar, "values") else xbar

    def f(k, y, Y):
        t, x, u = grid.time(k), X[:, k], ubar[:, min(k, grid.steps - 1)]
        return (-np.einsum("pca,pc->pa", problem.a_x(t, x, u), y)
                - np.einsum("pica,pic->pa", problem.b_x(t, x, u), Y) + problem.g_x(t, x, u))

    return BseeData(-problem.h_x(X[:, -1]), f, lipschitz, 2.0, f"{problem.name}:first_adjoint")


def adjoint_first(problem, grid, noise, xbar, ubar, basis, **kw):
    return solve_backward_regression(first_adjoint_data(problem, grid, xbar, ubar), problem.semigroup,
                                     grid, noise, basis, **kw)


def second_adjoint_data(problem, grid, xbar, ubar, first):
    X = xbar.values if hasattr(xbar, "values") else xbar
    y, Y = first.y.values, first.Y.values

    def args(k):
        return grid.time(k), X[:, k], ubar[:, min(k, grid.steps - 1)]

    return OperatorBseeData(
        P_T=-problem.h_xx(X[:, -1]),
        F=lambda k, _x: -hamiltonian_xx(problem, *args(k), y[:, k], Y[:, k]),
        J=lambda k, _x: problem.a_x(*args(k)),
        K=lambda k, _x: problem.b_x(*args(k)),
        label=f"{problem.name}:second_adjoint")


def adjoint_second(problem, grid, noise, xbar, ubar, first, basis, **kw):
    data = second_adjoint_data(problem, grid, xbar, ubar, first)
    return solve_operator_bsee(data, problem.semigroup, grid, noise, basis, **kw), data


# -- duality checks ---------------------------------------------------------------

def _normalized(lhs_terms, rhs_terms):
    lhs, rhs = sum(lhs_terms), sum(rhs_terms)
    scale = sum(abs(v) for v in list(lhs_terms) + list(rhs_terms))
    return {"lhs": lhs, "rhs": rhs, "residual": lhs - rhs,
            "normalized": abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs)}


def _along(bundle, fn, N):
    return np.stack([fn(k) for k in range(N + 1)], axis=1)


def _stochastic_integral(Z, noise):
    """sum_k <Z_k, dw_k> per path for an adapted (P, N+1, d) integrand; mean zero."""
    return np.einsum("pki,pki->p", Z[:, :-1], noise.increments)


def _with_martingale(lhs_terms, rhs_terms, M):
    """Normalized residual before and after removing the mean-zero term M from the first LHS term."""
    raw = _normalized(lhs_terms, rhs_terms)
    cv = _normalized([lhs_terms[0] - float(np.mean(M))] + list(lhs_terms[1:]), rhs_terms)
    cv["raw_normalized"] = raw["normalized"]
    cv["raw_residual"] = raw["residual"]
    return cv


def first_order_duality(bundle, spike, x2, x3, first, grid, noise):
    """The first-order identities for x2 and x3 against the first adjoint.

    The reported residual subtracts the discrete stochastic integral that
    Ito's formula for <y, x> attaches to the terminal pairing; it has mean
    zero, so only Monte Carlo noise is removed.  ``raw_normalized`` keeps
    the plain estimate.
    """
    prob = bundle.problem
    N, dt = grid.steps, grid.dt
    hx = prob.h_x(bundle.xbar[:, -1])
    g1 = _along(bundle, bundle.g1, N)
    b1 = _along(bundle, bundle.b1, N)
    chi = indicator(spike, grid)[None, :, None]
    y, Y = first.y.values, first.Y.values
    X2, X3 = x2.values, x3.values
    db = _along(bundle, bundle.db, N)
    da = _along(bundle, bundle.da, N)
    sig2 = np.einsum("pkiab,pkb->pkia", b1, X2) + chi[..., None] * db
    M2 = _stochastic_integral(np.einsum("pkia,pka->pki", Y, X2) + np.einsum("pka,pkia->pki", y, sig2), noise)
    id_x2 = _with_martingale([-expect_inner(hx, X2[:, -1]), -pairing(g1, X2, dt=dt)],
                           [pairing(Y, chi[..., None] * db, dt=dt)], M2)
    a11q = np.stack([_quad(bundle.a11(k), X2[:, k]) for k in range(N + 1)], axis=1)
    b11q = np.stack([_quad(bundle.b11(k), X2[:, k]) for k in range(N + 1)], axis=1)
    db1x2 = np.stack([np.einsum("piab,pb->pia", bundle.db1(k), X2[:, k]) for k in range(N + 1)], axis=1)
    sig3 = np.einsum("pkiab,pkb->pkia", b1, X3) + chi[..., None] * db1x2 + 0.5 * b11q
    M3 = _stochastic_integral(np.einsum("pkia,pka->pki", Y, X3) + np.einsum("pka,pkia->pki", y, sig3), noise)
    id_x3 = _with_martingale([-expect_inner(hx, X3[:, -1]), -pairing(g1, X3, dt=dt)],
                           [0.5 * pairing(y, a11q, dt=dt), 0.5 * pairing(Y, b11q, dt=dt),
                            pairing(y, chi * da, dt=dt), pairing(Y, chi[..., None] * db1x2, dt=dt)], M3)
    return {"first": id_x2, "second": id_x3}


def second_order_duality(bundle, spike, x2, first, second, second_data, grid, noise):
    """-E<h_xx x2(T), x2(T)> + E int <H_xx x2, x2> against the P and relaxed-Q terms.

    ``cross_terms`` is the signed pair of P b1 x2 terms; ``cross_bound`` is
    E int chi (|<b1 x2, P^T db>| + |<P db, b1 x2>|), which dominates it.
    """
    prob = bundle.problem
    N, dt = grid.steps, grid.dt
    X2 = x2.values
    chi = indicator(spike, grid)[None, :, None, None]
    db = chi * _along(bundle, bundle.db, N)
    b1 = _along(bundle, bundle.b1, N)
    Pv, Qv = second.P.values, second.Q.values
    y, Y = first.y.values, first.Y.values
    Hxx = np.stack([hamiltonian_xx(prob, grid.time(min(k, N - 1)), bundle.xbar[:, k],
                                   bundle.ubar[:, min(k, N - 1)], y[:, k], Y[:, k]) for k in range(N + 1)], axis=1)
    hxx = prob.h_xx(bundle.xbar[:, -1])
    b1x2 = np.einsum("pkiab,pkb->pkia", b1, X2)
    Pdb = np.einsum("pkab,pkib->pkia", Pv, db)
    PTdb = np.einsum("pkba,pkib->pkia", Pv, db)
    triple = {"xi": np.zeros(prob.m), "v": db}
    qh = apply_Q_relaxed(second, "Qhat", triple, second_data, prob.semigroup, grid, noise).values
    q = apply_Q_relaxed(second, "Q", triple, second_data, prob.semigroup, grid, noise).values
    cross = [pairing(b1x2, PTdb, dt=dt), pairing(Pdb, b1x2, dt=dt)]
    terms = cross + [pairing(Pdb, db, dt=dt), pairing(db, qh, dt=dt), pairing(q, db, dt=dt)]
    sig = b1x2 + db
    Px2 = np.einsum("pkab,pkb->pka", Pv, X2)
    Z = (np.einsum("pkiab,pkb,pka->pki", Qv, X2, X2) + np.einsum("pka,pkia->pki", Px2, sig)
         + np.einsum("pkab,pkib,pka->pki", Pv, sig, X2))
    res = _with_martingale([-expect_inner(np.einsum("pab,pb->pa", hxx, X2[:, -1]), X2[:, -1]),
                            pairing(np.einsum("pkab,pkb->pka", Hxx, X2), X2, dt=dt)], terms,
                           _stochastic_integral(Z, noise))
    res["cross_terms"] = float(sum(cross))
    res["cross_bound"] = float(dt * np.mean(np.sum(np.abs(np.einsum("pkia,pkia->pki", b1x2, PTdb))
                                                   + np.abs(np.einsum("pkia,pkia->pki", Pdb, b1x2)),
                                                   axis=(1, 2))))
    return res


# -- cost expansion and verdict ---------------------------------------------------

def expansion_leading_term(bundle, spike, first, second, grid):
    """E int chi [dg - <y,da> - <Y,db> - <P db, db>/2] dt, per path."""
    i0, i1 = spike_window(spike, grid)
    y, Y, Pv = first.y.values, first.Y.values, second.P.values
    acc = np.zeros(y.shape[0])
    for k in range(i0, i1):
        db = bundle.db(k)
        acc += grid.dt * (bundle.dg(k) - np.einsum("pa,pa->p", y[:, k], bundle.da(k))
                          - np.einsum("pia,pia->p", Y[:, k], db)
                          - 0.5 * np.einsum("pab,pib,pia->p", Pv[:, k], db, db))
    return acc


def martingale_terms(problem, grid, noise, xbar, ubar, xe, ue, first, second):
    """Discrete stochastic integrals sum_k Z_k dw_k with adapted Z_k, hence mean zero.

    With xi = x^eps - xbar and sigma its diffusion coefficient, Ito's formula
    for <y, xi> and <P xi, xi> produces exactly these integrands; subtracting
    them from the pathwise cost difference removes most of its O(eps) variance
    without changing its mean.
    """
    X = xbar.values if hasattr(xbar, "values") else xbar
    Xe = xe.values if hasattr(xe, "values") else xe
    y, Y = first.y.values, first.Y.values
    Pv, Qv = second.P.values, second.Q.values
    m1 = np.zeros(X.shape[0])
    m2 = np.zeros(X.shape[0])
    for k in range(grid.steps):
        t = grid.time(k)
        xi = Xe[:, k] - X[:, k]
        sig = problem.b(t, Xe[:, k], ue[:, k]) - problem.b(t, X[:, k], ubar[:, k])
        dw = noise.increments[:, k]
        z1 = np.einsum("pia,pa->pi", Y[:, k], xi) + np.einsum("pa,pia->pi", y[:, k], sig)
        Pxi = np.einsum("pab,pb->pa", Pv[:, k], xi)
        z2 = (np.einsum("piab,pb,pa->pi", Qv[:, k], xi, xi) + np.einsum("pa,pia->pi", Pxi, sig)
              + np.einsum("pab,pib,pa->pi", Pv[:, k], sig, xi))
        m1 += np.einsum("pi,pi->p", z1, dw)
        m2 += np.einsum("pi,pi->p", z2, dw)
    return m1 + 0.5 * m2


def cost_expansion_check(problem, grid, noise, xbar, ubar, first, second, u_alt, tau, eps_list, **kw):
    """Directly simulated J(u^eps) - J(ubar) on common noise against the leading term.

    ``relative_error`` compares the raw cost difference with the leading term.
    The remainder is estimated from the same samples after adding the
    mean-zero martingale terms of ``martingale_terms``.
    """
    base = cost_samples(problem, xbar, ubar, grid)
    bundle = PerturbationBundle(problem, grid, xbar, ubar, u_alt)
    rows = []
    for eps in eps_list:
        spike = SpikeSpec(tau, eps, u_alt)
        ue = spike_control(ubar, spike, grid)
        xe, _ = simulate_controlled(problem, ue, grid, noise, **kw)
        diff = cost_samples(problem, xe, ue, grid) - base
        dJ, dJ_se = mean_and_se(diff)
        lead = expansion_leading_term(bundle, spike, first, second, grid)
        L, L_se = mean_and_se(lead)
        rem, rem_se = mean_and_se(diff - lead + martingale_terms(problem, grid, noise, xbar, ubar, xe, ue,
                                                                 first, second))
        rows.append({"eps": eps, "delta_J": dJ, "delta_J_se": dJ_se, "leading": L, "leading_se": L_se,
                     "remainder": abs(rem), "remainder_se": rem_se,
                     "relative_error": abs(dJ - L) / abs(dJ) if dJ != 0 else 0.0})
    rem = [r["remainder"] for r in rows]
    slope = fit_slope(eps_list, rem) if all(r > 0 for r in rem) else float("inf")
    return {"rows": rows, "remainder_slope": slope}


def order_check(problem, grid, noise, xbar, ubar, u_alt, tau, eps_list, expansion=False, **kw):
    """Sup-in-time L^2 norms of x2, x3 (and of x^eps - xbar - x2 - x3) over the eps sweep."""
    bundle = PerturbationBundle(problem, grid, xbar, ubar, u_alt)
    X = xbar.values if hasattr(xbar, "values") else xbar
    rows = []
    for eps in eps_list:
        spike = SpikeSpec(tau, eps, u_alt)
        x2 = first_variation(bundle, spike, grid, noise, **kw)
        x3 = second_variation(bundle, spike, x2, grid, noise, **kw)
        row = {"eps": eps, "x2": sup_moment(x2, 2), "x3": sup_moment(x3, 2)}
        if expansion:
            xe, _ = simulate_controlled(problem, spike_control(ubar, spike, grid), grid, noise, **kw)
            row["remainder"] = sup_moment(xe.values - X - x2.values - x3.values, 2)
        rows.append(row)
    out = {"rows": rows, "slope_x2": fit_slope(eps_list, [r["x2"] for r in rows]),
           "slope_x3": fit_slope(eps_list, [r["x3"] for r in rows])}
    if expansion:
        rem = [r["remainder"] for r in rows]
        out["slope_remainder"] = fit_slope(eps_list, rem) if all(r > 0 for r in rem) else float("inf")
    return out


def mp_verdict(problem, grid, xbar, ubar, first, second, tol_const=1.0, probes=None, stride=1):
    """Scan  H(xbar,ubar,y,Y) - H(xbar,u,y,Y) - <P(b(ubar)-b(u)), b(ubar)-b(u)>/2  on a (t, path, u) lattice.

    The minimum is taken over (t, u) of the path mean; tol = 3 SE + tol_const * dt
    at that point.  The violation fraction counts lattice points below -tol.
    """
    probes = problem.controls.lattice() if probes is None else np.atleast_2d(probes)
    X = xbar.values if hasattr(xbar, "values") else xbar
    y, Y, Pv = first.y.values, first.Y.values, second.P.values
    Pn = X.shape[0]
    steps = list(range(0, grid.steps, stride))
    means = np.zeros((len(steps), len(probes)))
    ses = np.zeros_like(means)
    values = np.zeros((len(steps), len(probes), Pn))
    for a, k in enumerate(steps):
        t, x, ub = grid.time(k), X[:, k], ubar[:, k]
        H0 = hamiltonian(problem, t, x, ub, y[:, k], Y[:, k])
        b0 = problem.b(t, x, ub)
        for j, u in enumerate(probes):
            uu = np.broadcast_to(u, ub.shape)
            db = b0 - problem.b(t, x, uu)
            val = (H0 - hamiltonian(problem, t, x, uu, y[:, k], Y[:, k])
                   - 0.5 * np.einsum("pab,pib,pia->p", Pv[:, k], db, db))
            values[a, j] = val
            means[a, j], ses[a, j] = mean_and_se(val)
    flat = int(np.argmin(means))  # lowest index wins ties
    a, j = np.unravel_index(flat, means.shape)
    tol = 3.0 * ses[a, j] + tol_const * grid.dt
    return {"minimum": float(means[a, j]), "se": float(ses[a, j]), "tolerance": float(tol),
            "t_min": float(grid.time(steps[a])), "u_min": probes[j].tolist(),
            "violation_fraction": float(np.mean(values < -tol)),
            "passed": bool(means[a, j] >= -tol), "means": means, "probes": probes, "steps": steps}


# -- Riccati oracle ---------------------------------------------------------------

def _rk4_backward(rhs, terminal, T, n_steps):
    """Integrate R(t - h) = R(t) + int rhs, since -R' = rhs."""
    h = T / n_steps
    R = terminal.copy()
    out = [R.copy()]
    for _ in range(n_steps):
        k1 = rhs(R)
        k2 = rhs(R + 0.5 * h * k1)
        k3 = rhs(R + 0.5 * h * k2)
        k4 = rhs(R + h * k3)
        R = R + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(R.copy())
    return np.array(out[::-1])  # index 0 is t = 0


class RiccatiError(ArithmeticError):
    pass


def riccati_reference(lq, grid, substeps=8):
    """Backward RK4 for

      -R' = A^T R + R A + sum C^T R C + M - (R B + sum C^T R D) (N + sum D^T R D)^{-1} (B^T R + sum D^T R C)

    and the Lyapunov companion  -Rt' = A^T Rt + Rt A + sum C^T Rt C + M  (R(T) = Rt(T) = G).
    Returns R and Rt at the grid nodes, the feedback gains u = -L(t) x and the value R(0)x0.x0/2.
    """
    A, B, C, D = lq["A"], lq["B"], lq["C"], lq["D"]
    M, Nc, G = lq["M"], lq["N"], lq["G"]

    def gain_parts(R):
        S = Nc + np.einsum("iak,ab,ibl->kl", D, R, D)
        if np.min(np.linalg.eigvalsh(0.5 * (S + S.T))) <= 0:
            raise RiccatiError("N + D^T R D lost positive definiteness")
        Lt = B.T @ R + np.einsum("iak,ab,ibc->kc", D, R, C)
        return S, Lt

    def ric(R):
        S, Lt = gain_parts(R)
        base = A.T @ R + R @ A + np.einsum("iba,bc,icd->ad", C, R, C) + M
        return base - Lt.T @ np.linalg.solve(S, Lt)

    def lyap(R):
        return A.T @ R + R @ A + np.einsum("iba,bc,icd->ad", C, R, C) + M

    n = grid.steps * substeps
    Rf = _rk4_backward(ric, G, grid.t_end - grid.t_start, n)[::substeps]
    Rl = _rk4_backward(lyap, G, grid.t_end - grid.t_start, n)[::substeps]
    gains = []
    for R in Rf:
        S, Lt = gain_parts(R)
        gains.append(np.linalg.solve(S, Lt))
    x0 = lq["x0"]
    return {"R": Rf, "R_lyapunov": Rl, "gains": np.array(gains), "value": 0.5 * float(x0 @ Rf[0] @ x0)}


def feedback(gains, scale=1.0, clip=None):
    """Feedback rule u = -scale * L(t_k) x usable by ``simulate_controlled``."""
    def rule(k, t, x):
        u = -scale * x @ gains[k].T
        return u if clip is None else np.clip(u, clip[0], clip[1])
    return rule


# -- sampled assumption gates ---------------------------------------------------------

def _fd_check(fn, dfn, x, eps, out_axis_last=True):
    """Central differences of fn in x (P, m) stacked on a trailing axis."""
    m = x.shape[1]
    cols = []
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        cols.append((fn(x + e) - fn(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def validate_problem(problem, n_samples=64, seed=0, fd_eps=1e-5, fd_rtol=1e-4):
    """Sampled Lipschitz/boundedness checks and derivative-vs-finite-difference gates.

    Returns a list of diagnostics: dicts with gate, passed, and a witness when failing.
    """
    rng = np.random.default_rng(seed)
    m, T = problem.m, problem.T
    P = n_samples
    r = problem.sample_radius
    t = float(rng.uniform(0, T))
    x1 = rng.uniform(-r, r, (P, m))
    x2 = rng.uniform(-r, r, (P, m))
    lat = problem.controls.lattice()
    u = lat[rng.integers(0, len(lat), P)]
    CL = problem.lipschitz
    diags = []

    def gate(name, values, bound, points):
        values = np.asarray(values, dtype=float)
        worst = int(np.argmax(values))
        ok = bool(values[worst] <= bound * (1 + 1e-9))
        rec = {"gate": name, "passed": ok, "worst": float(values[worst]), "bound": float(bound)}
        if not ok:
            rec["witness"] = {k: np.asarray(v[worst]).tolist() for k, v in points.items()}
            rec["witness"]["t"] = t
        diags.append(rec)

    dx = np.linalg.norm(x1 - x2, axis=1)
    pts = {"x1": x1, "x2": x2, "u": u}
    zero = np.zeros((P, m))
    for name, fn in (("a", lambda x: problem.a(t, x, u)), ("b", lambda x: problem.b(t, x, u).reshape(P, -1)),
                     ("g", lambda x: problem.g(t, x, u)[:, None]), ("h", lambda x: problem.h(x)[:, None])):
        gate(f"lipschitz_{name}", np.linalg.norm(fn(x1) - fn(x2), axis=1) / dx, CL, pts)
        gate(f"bounded_{name}_at_zero", np.linalg.norm(fn(zero), axis=1), CL, {"u": u})
    for name, fn in (("a_x", lambda: problem.a_x(t, x1, u)), ("b_x", lambda: problem.b_x(t, x1, u).reshape(P, -1, m))):
        gate(f"bounded_{name}", np.linalg.norm(fn(), ord=2, axis=(-2, -1)), CL, {"x": x1, "u": u})
    gate("bounded_g_x", np.linalg.norm(problem.g_x(t, x1, u), axis=1), CL, {"x": x1, "u": u})
    gate("bounded_h_x", np.linalg.norm(problem.h_x(x1), axis=1), CL, {"x": x1})
    for name, val in (("a_xx", problem.a_xx(t, x1, u)), ("b_xx", problem.b_xx(t, x1, u)),
                      ("g_xx", problem.g_xx(t, x1, u)), ("h_xx", problem.h_xx(x1))):
        gate(f"bounded_{name}", np.sqrt(np.sum(val.reshape(P, -1) ** 2, axis=1)), CL, {"x": x1, "u": u})

    # derivative gates: callback vs central difference
    pairs = [
        ("a_x", lambda x: problem.a(t, x, u), problem.a_x(t, x1, u)),
        ("b_x", lambda x: problem.b(t, x, u), problem.b_x(t, x1, u)),
        ("g_x", lambda x: problem.g(t, x, u), problem.g_x(t, x1, u)),
        ("h_x", lambda x: problem.h(x), problem.h_x(x1)),
        ("a_xx", lambda x: problem.a_x(t, x, u), problem.a_xx(t, x1, u)),
        ("b_xx", lambda x: problem.b_x(t, x, u), problem.b_xx(t, x1, u)),
        ("g_xx", lambda x: problem.g_x(t, x, u), problem.g_xx(t, x1, u)),
        ("h_xx", lambda x: problem.h_x(x), problem.h_xx(x1)),
    ]
    for name, fn, declared in pairs:
        fd = _fd_check(fn, None, x1, fd_eps)
        err = np.abs(fd - declared).reshape(P, -1).max(axis=1)
        scale = np.maximum(np.abs(fd).reshape(P, -1).max(axis=1), 1.0)
        gate(f"derivative_{name}", err / scale, fd_rtol, {"x": x1, "u": u})
    return diags
