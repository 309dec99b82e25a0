"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``BSEELAB_BACKEND=python``
to force the numpy fallback.  Work is split over contiguous path chunks; each
path is processed by identical code regardless of the chunking, so results do
not depend on ``workers``.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKEND = "python" if (_compiled is None or os.environ.get("BSEELAB_BACKEND") == "python") else "compiled"


def _impl(backend=None):
    backend = backend or BACKEND
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled backend requested but bseelab._kernels is not built")
        return _compiled
    return _fallback


def chunks(n, workers):
    workers = max(1, min(int(workers), n)) if n > 0 else 1
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def run_chunked(fn, n, workers):
    """Call fn(start, stop) over path chunks, in a thread pool when workers > 1."""
    parts = chunks(n, workers)
    if len(parts) == 1:
        fn(*parts[0])
        return
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        list(pool.map(lambda ab: fn(*ab), parts))


def counter_normals(seed, n_paths, n_counters, path_start=0, workers=1, backend=None):
    impl = _impl(backend)
    out = np.empty((n_paths, n_counters), dtype=np.float64)
    seed = int(seed) % (1 << 64)

    def work(a, b):
        if impl is _fallback:
            impl.counter_normals(seed, path_start + a, b - a, n_counters, out=out[a:b])
        else:
            buf = np.empty((b - a, n_counters), dtype=np.float64)
            impl.counter_normals(seed, path_start + a, b - a, n_counters, buf)
            out[a:b] = buf

    run_chunked(work, n_paths, workers)
    return out


def _per_path(arr, P, ndim):
    """Broadcast a coefficient to a leading path axis without copying."""
    if arr is None:
        return None
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == ndim - 1:
        arr = np.broadcast_to(arr, (P,) + arr.shape)
    return arr


def linear_step(S, x, J, K, u, v, dw, dt, workers=1, backend=None):
    """Vectorised exponential-Euler step; see ``_fallback.linear_step``."""
    impl = _impl(backend)
    P, m = x.shape
    J = _per_path(J, P, 3)
    K = _per_path(K, P, 4)
    u = _per_path(u, P, 2)
    v = _per_path(v, P, 3)
    S = np.ascontiguousarray(S, dtype=np.float64)
    out = np.empty_like(x)

    def sl(a, lo, hi):
        return None if a is None else a[lo:hi]

    def work(lo, hi):
        if impl is _fallback:
            impl.linear_step(S, x[lo:hi], sl(J, lo, hi), sl(K, lo, hi), sl(u, lo, hi),
                             sl(v, lo, hi), dw[lo:hi], dt, out[lo:hi])
        else:
            buf = np.empty((hi - lo, m), dtype=np.float64)
            impl.linear_step(S, x[lo:hi], sl(J, lo, hi), sl(K, lo, hi), sl(u, lo, hi),
                             sl(v, lo, hi), dw[lo:hi], float(dt), buf)
            out[lo:hi] = buf

    run_chunked(work, P, workers)
    return out
