import numpy as np
import pytest

from bseelab import maximum_principle as mp
from bseelab.forward import ControlValueError
from bseelab.model_space import build_generator
from bseelab.regression import PolynomialBasis
from bseelab.stochastic import TimeGrid, sample_brownian


def small_lq(lipschitz=None, controls=None):
    m = 2
    A = build_generator("dirichlet_laplacian_1d", m, {"h": 1.0 / 3, "nu": 0.05})
    B = np.array([[1.0], [0.5]])
    C = 0.3 * np.eye(m)[None]
    D = 0.5 * np.ones((1, m, 1))
    prob = mp.lq_problem(A, B, C, D, np.eye(m), np.eye(1), np.eye(m), np.ones(m), [-3.0], [3.0],
                         lattice_size=13, lipschitz=lipschitz)
    if controls is not None:
        prob.controls = controls
    return prob


def nonlinear_problem():
    """a = 0.5 sin(x) + u, b = 0.2 cos(x): non-zero first and second derivatives."""
    m = 2

    def Z(P, *s):
        return np.zeros((P,) + s)

    def diag3(v):
        out = np.zeros(v.shape + (v.shape[-1],) * 2)
        idx = np.arange(v.shape[-1])
        out[..., idx, idx, idx] = v
        return out

    return mp.ControlProblem(
        "nonlinear", -np.eye(m), 1, 1,
        a=lambda t, x, u: 0.5 * np.sin(x) + u,
        b=lambda t, x, u: 0.2 * np.cos(x)[:, None, :],
        g=lambda t, x, u: 0.5 * u[:, 0] ** 2,
        h=lambda x: np.sum(np.sin(x), axis=1),
        a_x=lambda t, x, u: np.einsum("pa,ab->pab", 0.5 * np.cos(x), np.eye(m)),
        b_x=lambda t, x, u: np.einsum("pa,ab->pab", -0.2 * np.sin(x), np.eye(m))[:, None],
        g_x=lambda t, x, u: Z(x.shape[0], m),
        h_x=lambda x: np.cos(x),
        a_xx=lambda t, x, u: diag3(-0.5 * np.sin(x)),
        b_xx=lambda t, x, u: diag3(-0.2 * np.cos(x))[:, None],
        g_xx=lambda t, x, u: Z(x.shape[0], m, m),
        h_xx=lambda x: np.einsum("pa,ab->pab", -np.sin(x), np.eye(m)),
        controls=mp.ControlSet("box", lower=[-1.0], upper=[1.0], lattice_size=5),
        lipschitz=2.0, x0=np.zeros(m))


# -- control sets ---------------------------------------------------------------------

def test_control_set_membership():
    box = mp.ControlSet("box", lower=[-1.0, 0.0], upper=[1.0, 2.0], lattice_size=3)
    assert box.dim == 2
    assert box.lattice().shape == (9, 2)
    assert box.contains([[0.0, 1.0], [2.0, 1.0]]).tolist() == [True, False]
    fin = mp.ControlSet("finite", values=[[-1.0], [1.0]])
    assert fin.contains([[1.0], [0.0]]).tolist() == [True, False]
    with pytest.raises(ControlValueError):
        fin.check(np.array([[0.5]]))
    with pytest.raises(ValueError):
        mp.ControlSet("ball")
    with pytest.raises(ValueError):
        mp.ControlSet("box", lower=[1.0], upper=[0.0])


def test_control_outside_set_rejected():
    prob = small_lq()
    grid = TimeGrid(0.0, 1.0, 8)
    with pytest.raises(ControlValueError):
        mp.evaluate_cost(prob, np.array([5.0]), grid, sample_brownian(1, 10, grid))


# -- gates --------------------------------------------------------------------------------

def test_lq_gates_pass():
    diags = mp.validate_problem(small_lq())
    assert all(d["passed"] for d in diags), [d for d in diags if not d["passed"]]


def test_nonlinear_gates_pass_and_wrong_derivative_caught():
    prob = nonlinear_problem()
    assert all(d["passed"] for d in mp.validate_problem(prob))
    orig = prob.a_x
    prob.a_x = lambda t, x, u: 2.0 * orig(t, x, u)
    failed = [d for d in mp.validate_problem(prob) if not d["passed"]]
    names = {d["gate"] for d in failed}
    assert "derivative_a_x" in names
    rec = next(d for d in failed if d["gate"] == "derivative_a_x")
    assert "x" in rec["witness"] and "t" in rec["witness"]


def test_lipschitz_constant_too_small():
    failed = [d for d in mp.validate_problem(small_lq(lipschitz=0.05)) if not d["passed"]]
    lip = [d for d in failed if d["gate"].startswith("lipschitz_")]
    assert lip
    w = lip[0]["witness"]
    assert set(w) >= {"x1", "x2", "u", "t"}
    assert lip[0]["worst"] > 0.05


# -- spikes and variations -----------------------------------------------------------------

def test_misaligned_spike():
    grid = TimeGrid(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        mp.spike_window(mp.SpikeSpec(0.25, 0.1, np.array([1.0])), grid)
    with pytest.raises(ValueError):
        mp.spike_window(mp.SpikeSpec(0.9, 0.2, np.array([1.0])), grid)
    assert mp.spike_window(mp.SpikeSpec(0.2, 0.3, np.array([1.0])), grid) == (2, 5)


@pytest.fixture(scope="module")
def lq_run():
    prob = small_lq()
    grid = TimeGrid(0.0, 1.0, 40)
    noise = sample_brownian(5, 600, grid)
    ric = mp.riccati_reference(prob.meta["lq"], grid)
    ev = mp.evaluate_cost(prob, mp.feedback(ric["gains"]), grid, noise)
    basis = PolynomialBasis(ev["x"].values, 1, drop_collinear=True)
    first = mp.adjoint_first(prob, grid, noise, ev["x"], ev["u"], basis)
    second, sdata = mp.adjoint_second(prob, grid, noise, ev["x"], ev["u"], first, basis)
    return prob, grid, noise, ric, ev, first, second


def test_replacing_by_the_same_control_is_zero(lq_run):
    prob, grid, noise, ric, ev, first, second = lq_run
    bundle = mp.PerturbationBundle(prob, grid, ev["x"], ev["u"], ev["u"])
    spike = mp.SpikeSpec(0.25, 0.25, ev["u"])
    x2 = mp.first_variation(bundle, spike, grid, noise)
    x3 = mp.second_variation(bundle, spike, x2, grid, noise)
    assert not np.any(x2.values) and not np.any(x3.values)
    assert not np.any(mp.expansion_leading_term(bundle, spike, first, second, grid))


def test_doubling_delta_b_doubles_x2(lq_run):
    prob, grid, noise, ric, ev, first, second = lq_run
    bundle = mp.PerturbationBundle(prob, grid, ev["x"], ev["u"], np.array([2.0]))
    spike = mp.SpikeSpec(0.25, 0.1, np.array([2.0]))
    x2 = mp.first_variation(bundle, spike, grid, noise)
    x2d = mp.first_variation(bundle, spike, grid, noise, scale=2.0)
    assert np.array_equal(x2d.values, 2.0 * x2.values)


def test_spike_orders_small(lq_run):
    prob, grid, noise, ric, ev, first, second = lq_run
    rep = mp.order_check(prob, grid, noise, ev["x"], ev["u"], np.array([2.0]), 0.25, [0.2, 0.1, 0.05, 0.025])
    assert abs(rep["slope_x2"] - 0.5) <= 0.1
    assert abs(rep["slope_x3"] - 1.0) <= 0.15


def test_fit_slope_exact():
    xs = [0.1, 0.2, 0.4]
    assert mp.fit_slope(xs, [3 * x ** 1.5 for x in xs]) == pytest.approx(1.5)


# -- adjoints and verdict ------------------------------------------------------------------

def test_scalar_riccati_closed_form():
    # A = 0, B = 1, C = D = 0, M = 0, N = 1, G = g:  R(t) = g / (1 + g (T - t))
    g = 2.0
    lq = {"A": np.zeros((1, 1)), "B": np.eye(1), "C": np.zeros((1, 1, 1)), "D": np.zeros((1, 1, 1)),
          "M": np.zeros((1, 1)), "N": np.eye(1), "G": g * np.eye(1), "x0": np.ones(1), "T": 1.0}
    grid = TimeGrid(0.0, 1.0, 20)
    ric = mp.riccati_reference(lq, grid)
    ref = g / (1 + g * (1.0 - grid.nodes))
    assert np.allclose(ric["R"][:, 0, 0], ref, atol=1e-9)
    assert np.allclose(ric["R_lyapunov"][:, 0, 0], g, atol=1e-12)
    assert ric["value"] == pytest.approx(0.5 * ref[0], abs=1e-9)


def test_first_adjoint_matches_riccati(lq_run):
    prob, grid, noise, ric, ev, first, second = lq_run
    y_ref = -np.einsum("kab,pkb->pka", ric["R"], ev["x"].values)
    err = np.sqrt(np.mean((first.y.values - y_ref) ** 2) / np.mean(y_ref ** 2))
    assert err <= 5 * (np.sqrt(grid.dt) + noise.n_paths ** -0.5)
    P_ref = -ric["R_lyapunov"]
    assert np.allclose(second.P.values, P_ref[None], atol=5 * grid.dt)


def test_verdict_at_optimum_and_away(lq_run):
    prob, grid, noise, ric, ev, first, second = lq_run
    v = mp.mp_verdict(prob, grid, ev["x"], ev["u"], first, second)
    assert v["passed"]
    sub = mp.evaluate_cost(prob, np.array([-1.0]), grid, noise)
    basis = PolynomialBasis(sub["x"].values, 1, drop_collinear=True)
    f1 = mp.adjoint_first(prob, grid, noise, sub["x"], sub["u"], basis)
    s1, _ = mp.adjoint_second(prob, grid, noise, sub["x"], sub["u"], f1, basis)
    vs = mp.mp_verdict(prob, grid, sub["x"], sub["u"], f1, s1)
    assert not vs["passed"] and vs["minimum"] < v["minimum"]


def test_singleton_control_set_gives_zero_verdict(lq_run):
    prob, grid, noise, ric, ev, first, second = lq_run
    single = small_lq(controls=mp.ControlSet("finite", values=[[0.5]]))
    sub = mp.evaluate_cost(single, np.array([0.5]), grid, noise)
    v = mp.mp_verdict(single, grid, sub["x"], sub["u"], first, second)
    assert v["minimum"] == 0.0 and v["violation_fraction"] == 0.0
