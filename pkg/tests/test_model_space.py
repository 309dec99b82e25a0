import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bseelab.model_space import (LiftedSemigroup, ModelSpace, Semigroup, build_generator, lift_generator,
                                 project, project_vector, projection, semigroup_apply)


def heat(m, nu=0.1):
    return build_generator("dirichlet_laplacian_1d", m, {"h": 1.0 / (m + 1), "nu": nu})


def test_model_space_rejects_zero_dim():
    with pytest.raises(ValueError):
        ModelSpace(0)
    assert ModelSpace(3).basis_vector(1).tolist() == [0.0, 1.0, 0.0]


def test_scalar_generator_matches_exponential():
    sg = Semigroup(build_generator("scalar", 1, {"lam": -2.0}))
    assert sg(0.3)[0, 0] == pytest.approx(np.exp(-0.6), rel=1e-14)


def test_laplacian_is_symmetric_and_negative():
    A = heat(5)
    assert np.array_equal(A, A.T)
    assert np.all(np.linalg.eigvalsh(A) < 0)


def test_identity_at_zero_is_exact():
    sg = Semigroup(heat(4))
    assert np.array_equal(sg(0.0), np.eye(4))


def test_negative_time_rejected():
    sg = Semigroup(heat(2))
    with pytest.raises(ValueError):
        sg(-0.1)
    with pytest.raises(ValueError):
        semigroup_apply(sg, -1.0, np.ones(2))


def test_unknown_generator_kind():
    with pytest.raises(ValueError):
        build_generator("laplacian", 3, {})


def test_cache_returns_read_only_matrix():
    sg = Semigroup(heat(3))
    M = sg(0.25)
    assert M is sg(0.25)
    with pytest.raises(ValueError):
        M[0, 0] = 1.0


@settings(max_examples=30, deadline=None)
@given(s=st.floats(0.0, 2.0), t=st.floats(0.0, 2.0))
def test_semigroup_property(s, t):
    sg = Semigroup(heat(4, 0.05))
    assert np.allclose(sg(s + t), sg(s) @ sg(t), atol=1e-12)


def test_adjoint_is_transpose():
    sg = Semigroup(heat(3) + np.triu(np.ones((3, 3)), 1))
    assert np.array_equal(sg.adjoint(0.4), sg(0.4).T)


def test_apply_on_stack_of_vectors(rng):
    sg = Semigroup(heat(3))
    V = rng.standard_normal((5, 3))
    assert np.allclose(semigroup_apply(sg, 0.2, V), V @ sg(0.2).T)


def test_lifted_semigroup_acts_by_conjugation(rng):
    A = rng.standard_normal((3, 3))
    sg = Semigroup(A)
    lift = LiftedSemigroup(sg)
    O = rng.standard_normal((3, 3))
    S = sg(0.7)
    assert np.allclose((lift(0.7) @ O.reshape(-1)).reshape(3, 3), S @ O @ S.T, atol=1e-12)
    # the lifted generator exponentiates to the same operator
    assert np.allclose(Semigroup(lift_generator(A))(0.7), lift(0.7), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(rank=st.integers(0, 5), data=st.data())
def test_projection_is_idempotent(rank, data):
    vals = data.draw(st.lists(st.floats(-10, 10), min_size=25, max_size=25))
    M = np.array(vals).reshape(5, 5)
    once = project(rank, M)
    assert np.array_equal(project(rank, once), once)
    G = projection(rank, 5)
    assert np.array_equal(once, G @ M @ G)
    v = M[0]
    assert np.array_equal(project(rank, v), project_vector(rank, v))


def test_projection_rank_errors():
    with pytest.raises(ValueError):
        projection(4, 3)
    with pytest.raises(ValueError):
        project(-1, np.eye(2))
    with pytest.raises(ValueError):
        project_vector(3, np.ones(2))
