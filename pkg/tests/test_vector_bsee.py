import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bseelab.model_space import Semigroup, build_generator
from bseelab.regression import PolynomialBasis
from bseelab.stochastic import TimeGrid, sample_brownian
from bseelab.vector_bsee import (BseeData, NonLipschitzDriver, check_lipschitz, duality_residual,
                                 make_random_tests, process_error, shifted, solve_backward_regression,
                                 time_consistency_check, transposition_solve, wellposedness_bound_check)

LAM = 1.0


@pytest.fixture(scope="module")
def lam_setup():
    grid = TimeGrid(0.0, 1.0, 32)
    noise = sample_brownian(21, 3000, grid)
    sg = Semigroup(build_generator("scalar", 1, {"lam": -LAM}))
    data = BseeData(noise.W[:, -1].copy())
    basis = PolynomialBasis(noise.W, 1)
    decay = np.exp(-LAM * (1.0 - grid.nodes))
    y_ref = decay[None, :, None] * noise.W
    Y_ref = np.broadcast_to(decay[None, :, None, None], (noise.n_paths, 33, 1, 1)).copy()
    return grid, noise, sg, data, basis, y_ref, Y_ref


def tol(grid, noise):
    return 5 * (np.sqrt(grid.dt) + noise.n_paths ** -0.5)


def test_regression_matches_closed_form(lam_setup):
    grid, noise, sg, data, basis, y_ref, Y_ref = lam_setup
    sol = solve_backward_regression(data, sg, grid, noise, basis)
    assert process_error(sol, y_ref, Y_ref) <= tol(grid, noise) / 5
    assert np.array_equal(sol.y.values[:, -1], data.y_T)


def test_transposition_matches_regression(lam_setup):
    grid, noise, sg, data, basis, y_ref, Y_ref = lam_setup
    tr = transposition_solve(data, sg, grid, noise, basis)
    assert process_error(tr, y_ref, Y_ref) <= tol(grid, noise) / 5
    assert tr.report["converged"]


def test_forward_route_equals_adjoint_route():
    grid = TimeGrid(0.0, 1.0, 6)
    noise = sample_brownian(3, 300, grid)
    sg = Semigroup(build_generator("scalar", 1, {"lam": -LAM}))
    data = BseeData(np.sin(noise.W[:, -1]))
    basis = PolynomialBasis(noise.W, 1)
    a = transposition_solve(data, sg, grid, noise, basis, method="adjoint")
    f = transposition_solve(data, sg, grid, noise, basis, method="forward")
    assert np.allclose(a.y.values, f.y.values, atol=1e-10)
    assert np.allclose(a.Y.values, f.Y.values, atol=1e-10)
    with pytest.raises(ValueError):
        transposition_solve(data, sg, grid, noise, basis, method="bogus")


def test_linear_driver_oracle():
    # f = a y with A = 0 and y_T = 1: y(t) = exp(-a (T - t)), Y = 0
    grid = TimeGrid(0.0, 1.0, 200)
    noise = sample_brownian(4, 50, grid)
    sg = Semigroup(np.zeros((1, 1)))
    a = 0.7
    data = BseeData(np.ones((50, 1)), lambda k, y, Y: a * y, lipschitz=a)
    basis = PolynomialBasis(noise.W, 1)
    ref = np.exp(-a * (1.0 - grid.nodes))
    for sol in (solve_backward_regression(data, sg, grid, noise, basis, implicit=True),
                transposition_solve(data, sg, grid, noise, basis, picard_tol=1e-12, picard_max=50)):
        assert np.max(np.abs(sol.y.values[:, :, 0] - ref)) <= 2 * a * grid.dt
        assert np.max(np.abs(sol.Y.values)) < 1e-12


def test_non_lipschitz_driver_rejected():
    data = BseeData(np.zeros((8, 1)), lambda k, y, Y: y ** 3, lipschitz=1.0)
    with pytest.raises(NonLipschitzDriver):
        check_lipschitz(data)
    ok = BseeData(np.zeros((8, 1)), lambda k, y, Y: 0.5 * np.sin(y), lipschitz=1.0)
    assert check_lipschitz(ok)["checked"]


def test_duality_residual_discriminates(lam_setup):
    grid, noise, sg, data, basis, *_ = lam_setup
    sol = solve_backward_regression(data, sg, grid, noise, basis)
    tests = make_random_tests(grid, noise, 1, 8, seed=5)
    good = duality_residual(sol, data, tests, sg, grid, noise)
    bad = duality_residual(shifted(sol, 1.0), data, tests, sg, grid, noise)
    assert good["max"] <= tol(grid, noise)
    assert min(r["normalized"] for r in bad["rows"]) >= 0.1


@settings(max_examples=10, deadline=None)
@given(e=st.integers(-3, 3))
def test_doubling_the_data_scales_exactly(lam_setup, e):
    grid, noise, sg, data, basis, *_ = lam_setup
    c = 2.0 ** e
    s1 = solve_backward_regression(data, sg, grid, noise, basis)
    sc = solve_backward_regression(BseeData(c * data.y_T), sg, grid, noise, basis)
    assert np.array_equal(sc.y.values, c * s1.y.values)


def test_time_consistency(lam_setup):
    grid, noise, sg, data, basis, *_ = lam_setup
    same = time_consistency_check(data, sg, grid, noise, basis, 16, 16)
    assert same["bit_identical"]
    rep = time_consistency_check(data, sg, grid, noise, basis, 0, 16)
    assert rep["l2_discrepancy"] <= tol(grid, noise)
    with pytest.raises(ValueError):
        time_consistency_check(data, sg, grid, noise, basis, 20, 10)


def test_wellposedness_ratio(lam_setup):
    grid, noise, sg, data, basis, *_ = lam_setup
    sol = solve_backward_regression(data, sg, grid, noise, basis)
    rep = wellposedness_bound_check(data, sol)
    assert 0 < rep["ratio"] < 10
    zero = BseeData(np.zeros_like(data.y_T))
    assert wellposedness_bound_check(zero, solve_backward_regression(zero, sg, grid, noise, basis))["ratio"] == 0.0


def test_path_count_mismatch(lam_setup):
    grid, noise, sg, data, basis, *_ = lam_setup
    with pytest.raises(ValueError):
        solve_backward_regression(BseeData(np.zeros((5, 1))), sg, grid, noise, basis)
