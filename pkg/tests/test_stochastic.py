import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bseelab import kernels
from bseelab.stochastic import (AdaptedProcess, TimeGrid, load_process, lp_norm, mean_and_se, mixed_norm,
                                pairing, sample_brownian, save_process, sup_moment, zeros_process)

BACKENDS = ["python"] + (["compiled"] if kernels._compiled is not None else [])


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 300), data=st.data())
def test_grid_index_roundtrip(steps, data):
    g = TimeGrid(0.0, 1.0, steps)
    k = data.draw(st.integers(0, steps))
    assert g.index(g.time(k)) == k


def test_grid_index_rejects_off_node():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 10).index(0.05)


def test_grid_nesting_and_partition():
    g = TimeGrid(0.0, 1.0, 16)
    assert g.coarsen(4).nested_in(g)
    assert g.partition(4).tolist() == [0, 4, 8, 12, 16]
    with pytest.raises(ValueError):
        g.partition(3)
    with pytest.raises(ValueError):
        g.coarsen(3)


def test_brownian_moments():
    g = TimeGrid(0.0, 1.0, 8)
    nz = sample_brownian(5, 20000, g, d=2)
    assert abs(nz.increments.mean()) < 0.01
    assert nz.increments.var() == pytest.approx(g.dt, rel=0.03)
    assert nz.W[:, -1].var() == pytest.approx(1.0, rel=0.05)


def test_prefix_property():
    g = TimeGrid(0.0, 1.0, 8)
    big = sample_brownian(3, 50, g)
    small = sample_brownian(3, 20, g)
    assert np.array_equal(big.increments[:20], small.increments)
    tail = sample_brownian(3, 30, g, path_start=20)
    assert np.array_equal(big.increments[20:], tail.increments)


def test_seeds_differ():
    g = TimeGrid(0.0, 1.0, 8)
    assert not np.array_equal(sample_brownian(1, 10, g).increments, sample_brownian(2, 10, g).increments)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("workers", [1, 2, 3, 7])
def test_worker_invariance(backend, workers):
    g = TimeGrid(0.0, 1.0, 12)
    ref = sample_brownian(9, 101, g, d=2, backend=backend)
    got = sample_brownian(9, 101, g, d=2, workers=workers, backend=backend)
    assert np.array_equal(ref.increments, got.increments)


@pytest.mark.skipif(kernels._compiled is None, reason="compiled core not built")
def test_backends_bit_identical():
    a = kernels.counter_normals(123, 64, 50, backend="python")
    b = kernels.counter_normals(123, 64, 50, backend="compiled")
    assert np.array_equal(a, b)


def test_coarsen_sums_increments():
    g = TimeGrid(0.0, 1.0, 16)
    nz = sample_brownian(4, 10, g)
    c = nz.coarsen(4)
    assert c.grid.steps == 4
    assert np.allclose(c.W[:, -1], nz.W[:, -1], atol=1e-14)
    assert np.allclose(c.W, nz.W[:, ::4], atol=1e-14)


def test_resample_after_keeps_prefix():
    g = TimeGrid(0.0, 1.0, 10)
    nz = sample_brownian(4, 10, g)
    r = nz.resample_after(5, 99)
    assert np.array_equal(r.increments[:, :5], nz.increments[:, :5])
    assert not np.array_equal(r.increments[:, 5:], nz.increments[:, 5:])


def test_process_arithmetic_checks_grid():
    g1, g2 = TimeGrid(0.0, 1.0, 4), TimeGrid(0.0, 1.0, 8)
    a = zeros_process(g1, 3, (2,))
    with pytest.raises(ValueError):
        a + zeros_process(g2, 3, (2,))
    assert (a.scale(2.0) - a).values.shape == (3, 5, 2)


def test_norms_on_deterministic_process():
    g = TimeGrid(0.0, 1.0, 4)
    vals = np.ones((5, 5, 2)) * np.array([3.0, 4.0])
    x = AdaptedProcess(g, vals)
    assert lp_norm(x, 2.0) == pytest.approx(5.0)
    assert lp_norm(x, 2.0, mode="integral_t") == pytest.approx(5.0)
    assert mixed_norm(x, 4.0, 2.0) == pytest.approx(5.0)
    assert sup_moment(x) == pytest.approx(5.0)
    assert pairing(x, x) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        lp_norm(x, 0.5)
    with pytest.raises(ValueError):
        lp_norm(x, mode="nope")


def test_lp_norm_rejects_nan():
    g = TimeGrid(0.0, 1.0, 2)
    x = AdaptedProcess(g, np.full((2, 3, 1), np.nan))
    with pytest.raises(ValueError):
        lp_norm(x)


def test_mean_and_se():
    m, se = mean_and_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def test_save_load_roundtrip(tmp_path):
    g = TimeGrid(0.0, 0.5, 3)
    vals = np.random.default_rng(0).standard_normal((2, 4, 2, 2))
    save_process(AdaptedProcess(g, vals), tmp_path / "p", seed=7)
    back, header = load_process(tmp_path / "p")
    assert back.grid == g
    assert np.array_equal(back.values, vals)
    assert header["seed"] == 7


def test_env_forces_python_backend():
    import os
    import subprocess
    import sys
    env = dict(os.environ, BSEELAB_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import bseelab; print(bseelab.BACKEND)"], env=env,
                         capture_output=True, text=True, check=True).stdout.strip()
    assert out == "python"
