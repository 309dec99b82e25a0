import numpy as np
import pytest

from bseelab.model_space import Semigroup, build_generator
from bseelab.operator_bsee import (OperatorBseeData, apply_Q_relaxed, build_Qn, diagonal_tail, galerkin_sequence,
                                   lyapunov_closed_form, partition_project, random_operator_tests,
                                   solve_operator_bsee, solve_operator_bsee_matrix, symmetry_defect,
                                   transposition_residual_operator)
from bseelab.regression import PolynomialBasis
from bseelab.stochastic import TimeGrid, sample_brownian

M = 3


def heat():
    return Semigroup(build_generator("dirichlet_laplacian_1d", M, {"h": 1.0 / (M + 1), "nu": 0.05}))


def spd(seed):
    X = np.random.default_rng(seed).standard_normal((M, M))
    return X @ X.T / M + np.eye(M)


@pytest.fixture(scope="module")
def noisy():
    grid = TimeGrid(0.0, 1.0, 32)
    noise = sample_brownian(8, 2000, grid)
    sg = heat()
    rng = np.random.default_rng(2)
    G1 = rng.standard_normal((M, M))
    G1 = 0.25 * (G1 + G1.T)
    P_T = spd(1)[None] + noise.W[:, -1, 0][:, None, None] * G1[None]
    data = OperatorBseeData(P_T, None, None, 0.6 * np.eye(M)[None])
    data.meta_G1 = G1
    basis = PolynomialBasis(noise.W, 1)
    return grid, noise, sg, data, basis, solve_operator_bsee(data, sg, grid, noise, basis)


def test_lyapunov_closed_form():
    grid = TimeGrid(0.0, 1.0, 16)
    noise = sample_brownian(1, 100, grid)
    sg = heat()
    G = spd(3)
    data = OperatorBseeData(np.broadcast_to(G, (100, M, M)).copy())
    sol = solve_operator_bsee(data, sg, grid, noise, PolynomialBasis(noise.W, 1))
    ref = lyapunov_closed_form(sg, grid, G)
    rel = np.linalg.norm(sol.P.values - ref[None], axis=(-2, -1)) / np.linalg.norm(ref, axis=(-2, -1))
    assert rel.max() <= 1e-10
    assert np.abs(sol.Q.values).max() <= 1e-12


def test_symmetry_preserved(noisy):
    *_, sol = noisy
    assert symmetry_defect(sol)["P_relative"] <= 1e-10


def test_lifted_equals_matrix_recursion(noisy):
    grid, noise, sg, data, basis, sol = noisy
    ref = solve_operator_bsee_matrix(data, sg, grid, noise, basis)
    assert np.allclose(ref.P.values, sol.P.values, atol=1e-12)
    assert np.allclose(ref.Q.values, sol.Q.values, atol=1e-12)


def test_q_matches_w_coefficient(noisy):
    # P = P0 + W P1 exactly, so Q = P1 with P1(t) = e^{sigma^2 (T-t)} S(T-t)^T G1 S(T-t)
    grid, noise, sg, data, basis, sol = noisy
    G1 = np.asarray(data.meta_G1)
    Q = sol.Q.values[:, :-1, 0].mean(axis=0)
    err = 0.0
    for k in range(grid.steps):
        tau = 1.0 - grid.time(k)
        S = sg(tau)
        ref = np.exp(0.36 * tau) * S.T @ G1 @ S
        err = max(err, np.linalg.norm(Q[k] - ref) / np.linalg.norm(ref))
    assert err <= 5 * (grid.dt + noise.n_paths ** -0.5)


def test_residual_detects_dropped_term(noisy):
    grid, noise, sg, data, basis, sol = noisy
    bad = solve_operator_bsee(data, sg, grid, noise, basis, drop_KPK=True)
    pairs = random_operator_tests(grid, noise, M, 4, seed=3, with_u=False, with_v=False)
    tol = 5 * (grid.dt + noise.n_paths ** -0.5)
    good = [transposition_residual_operator(sol, data, sg, grid, noise, a, b)["normalized"] for a, b in pairs]
    worse = [transposition_residual_operator(bad, data, sg, grid, noise, a, b)["normalized"] for a, b in pairs]
    assert max(good) <= tol
    assert min(worse) >= 0.05


def test_relaxed_equals_direct(noisy):
    grid, noise, sg, data, basis, sol = noisy
    (a, b), = random_operator_tests(grid, noise, M, 1, seed=4)
    d = transposition_residual_operator(sol, data, sg, grid, noise, a, b)
    r = transposition_residual_operator(sol, data, sg, grid, noise, a, b, relaxed=True)
    for key in d["terms"]:
        assert d["terms"][key] == pytest.approx(r["terms"][key], abs=1e-10)


def test_apply_q_relaxed_modes(noisy):
    grid, noise, sg, data, basis, sol = noisy
    triple = {"xi": np.ones(M)}
    q = apply_Q_relaxed(sol, "Q", triple, data, sg, grid, noise, start=4).values
    qh = apply_Q_relaxed(sol, "Qhat", triple, data, sg, grid, noise, start=4).values
    assert not np.any(q[:, :4])
    # Q is symmetric here, so both modes coincide up to rounding
    assert np.allclose(q, qh, atol=1e-10)
    with pytest.raises(ValueError):
        apply_Q_relaxed(sol, "R", triple, data, sg, grid, noise)


def test_galerkin_diagonal_tails():
    grid = TimeGrid(0.0, 1.0, 8)
    noise = sample_brownian(1, 50, grid)
    m = 6
    P_T = np.diag(2.0 ** -np.arange(1, m + 1))
    data = OperatorBseeData(np.broadcast_to(P_T, (50, m, m)).copy())
    _, rows = galerkin_sequence(data, range(m + 1), Semigroup(np.zeros((m, m))), grid, noise,
                                PolynomialBasis(noise.W, 1))
    for r in rows:
        assert r["error"] == pytest.approx(diagonal_tail(r["rank"], m), abs=1e-12)
    assert rows[-1]["error"] == 0.0
    with pytest.raises(ValueError):
        galerkin_sequence(data, [3, 1], Semigroup(np.zeros((m, m))), grid, noise, PolynomialBasis(noise.W, 1))


def test_partition_requires_block_constant(noisy):
    grid, noise, sg, data, basis, sol = noisy
    v = np.zeros((noise.n_paths, grid.steps + 1, M))
    v[:, 3] = 1.0
    with pytest.raises(ValueError):
        partition_project(v, 4, sg, grid, noise)
    v = np.ones((noise.n_paths, grid.steps + 1, M))
    el, err = partition_project(v, 4, sg, grid, noise, None, data.K)
    assert el.values.shape == v.shape and err > 0
    qn = build_Qn(sol, el, sg, grid, noise, None, data.K)
    assert qn.shape == v.shape
