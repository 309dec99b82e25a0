"""Time grids, counter-seeded Brownian drivers and adapted-process storage.

Processes are stored path-major: ``values[path, step, ...]`` over the N+1 grid
nodes.  Quantities that only live on left endpoints (integrands against dt or
dw) still carry N+1 entries; the last one is ignored by every quadrature.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"need t_start < t_end, got {self.t_start} >= {self.t_end}")
        if int(self.steps) < 1:
            raise ValueError("grid needs at least one step")

    @property
    def dt(self):
        return (self.t_end - self.t_start) / self.steps

    @property
    def nodes(self):
        return self.t_start + self.dt * np.arange(self.steps + 1)

    def time(self, k):
        return self.t_start + self.dt * k

    def index(self, t):
        """Grid index of time t; raises if t is not a node."""
        k = (float(t) - self.t_start) / self.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-9 or kr < 0 or kr > self.steps:
            raise ValueError(f"time {t} is not a node of {self}")
        return kr

    def refine(self, factor):
        return TimeGrid(self.t_start, self.t_end, self.steps * int(factor))

    def coarsen(self, factor):
        factor = int(factor)
        if self.steps % factor:
            raise ValueError(f"{self.steps} steps not divisible by {factor}")
        return TimeGrid(self.t_start, self.t_end, self.steps // factor)

    def nested_in(self, other):
        """True if every node of self is a node of other."""
        return (other.t_start == self.t_start and other.t_end == self.t_end
                and other.steps % self.steps == 0)

    def partition(self, n):
        """Indices of a partition with n equal blocks (n must divide steps)."""
        if n < 1 or self.steps % n:
            raise ValueError(f"partition with {n} blocks does not nest in {self.steps} steps")
        return np.arange(0, self.steps + 1, self.steps // n)


@dataclass
class BrownianBundle:
    """Brownian increments dw[path, step, component] ~ N(0, dt).

    Path k's increments are a pure function of (master_seed, k); the bundle
    of the first n paths of a larger bundle is the smaller bundle.
    """

    master_seed: int
    grid: TimeGrid
    increments: np.ndarray
    path_start: int = 0

    @property
    def n_paths(self):
        return self.increments.shape[0]

    @property
    def d(self):
        return self.increments.shape[2]

    @property
    def W(self):
        """Brownian paths at the grid nodes, shape (P, N+1, d)."""
        P, N, d = self.increments.shape
        W = np.zeros((P, N + 1, d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W

    def coarsen(self, factor):
        factor = int(factor)
        g = self.grid.coarsen(factor)
        P, N, d = self.increments.shape
        inc = self.increments.reshape(P, N // factor, factor, d).sum(axis=2)
        return BrownianBundle(self.master_seed, g, inc, self.path_start)

    def subset(self, n):
        return BrownianBundle(self.master_seed, self.grid, self.increments[:n].copy(), self.path_start)

    def resample_after(self, step, seed):
        """Copy whose increments at indices >= step come from another seed."""
        fresh = sample_brownian(seed, self.n_paths, self.grid, self.d, path_start=self.path_start)
        inc = self.increments.copy()
        inc[:, step:] = fresh.increments[:, step:]
        return BrownianBundle(self.master_seed, self.grid, inc, self.path_start)


def sample_brownian(master_seed, n_paths, grid, d=1, path_start=0, workers=1, backend=None):
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if d < 1:
        raise ValueError("noise dimension d must be >= 1")
    z = kernels.counter_normals(master_seed, n_paths, grid.steps * d, path_start=path_start,
                                workers=workers, backend=backend)
    inc = z.reshape(n_paths, grid.steps, d) * np.sqrt(grid.dt)
    return BrownianBundle(int(master_seed), grid, inc, path_start)


@dataclass
class AdaptedProcess:
    """values[path, step, *shape]; vector processes have shape (m,), operator
    processes (m, m), and d-tuples carry a leading (d,) in ``shape``."""

    grid: TimeGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape[2:]

    def at(self, k):
        return self.values[:, k]

    def __add__(self, other):
        _check_same(self, other)
        return AdaptedProcess(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same(self, other)
        return AdaptedProcess(self.grid, self.values - other.values)

    def scale(self, c):
        return AdaptedProcess(self.grid, c * self.values)


AdaptedVectorProcess = AdaptedProcess
AdaptedOperatorProcess = AdaptedProcess


def zeros_process(grid, n_paths, shape):
    return AdaptedProcess(grid, np.zeros((n_paths, grid.steps + 1) + tuple(shape)))


def _check_same(a, b):
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")


def _values(x):
    return x.values if isinstance(x, AdaptedProcess) else np.asarray(x, dtype=float)


def pointwise_norm(values):
    """Euclidean / Frobenius norm over all trailing axes, shape (P, N+1)."""
    v = np.asarray(values)
    return np.sqrt(np.sum(v.reshape(v.shape[0], v.shape[1], -1) ** 2, axis=2))


def lp_norm(process, p=2.0, mode="sup_t", dt=None):
    """Empirical L^p_F norm.

    sup_t:      (E sup_t |x(t)|^p)^(1/p)
    integral_t: (E (int |x|^2 dt)^(p/2))^(1/p), left-endpoint rule
    """
    if not 1.0 <= p < np.inf:
        raise ValueError(f"p must lie in [1, inf), got {p}")
    v = _values(process)
    if v.size == 0:
        raise ValueError("empty process")
    if not np.all(np.isfinite(v)):
        raise ValueError("process has non-finite values")
    nrm = pointwise_norm(v)
    if mode == "sup_t":
        return float(np.mean(nrm.max(axis=1) ** p) ** (1.0 / p))
    if mode == "integral_t":
        if dt is None:
            dt = process.grid.dt
        quad = np.sum(nrm[:, :-1] ** 2, axis=1) * dt
        return float(np.mean(quad ** (p / 2.0)) ** (1.0 / p))
    raise ValueError(f"unknown mode {mode!r}")


def mixed_norm(process, p_omega=2.0, r_time=2.0, dt=None, start=0, stop=None):
    """(int (E|x(t)|^p_omega)^(r_time/p_omega) dt)^(1/r_time) over left endpoints."""
    v = _values(process)
    if dt is None:
        dt = process.grid.dt
    nrm = pointwise_norm(v)
    stop = nrm.shape[1] - 1 if stop is None else stop
    mom = np.mean(nrm[:, start:stop] ** p_omega, axis=0) ** (1.0 / p_omega)
    return float((np.sum(mom ** r_time) * dt) ** (1.0 / r_time))


def sup_moment(process, p=2.0):
    """sup_t (E|x(t)|^p)^(1/p) -- the L^inf_F(0,T;L^p) norm."""
    nrm = pointwise_norm(_values(process))
    return float(np.max(np.mean(nrm ** p, axis=0) ** (1.0 / p)))


def pairing(phi, psi, dt=None, start=0, stop=None):
    """E int <phi, psi> dt by the left-endpoint rule over steps [start, stop)."""
    if isinstance(phi, AdaptedProcess) and isinstance(psi, AdaptedProcess):
        if phi.grid != psi.grid:
            raise ValueError("pairing over different grids")
    a = _values(phi)
    b = _values(psi)
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"pairing shape mismatch {a.shape} vs {b.shape}")
    if dt is None:
        g = phi.grid if isinstance(phi, AdaptedProcess) else psi.grid
        dt = g.dt
    stop = a.shape[1] - 1 if stop is None else stop
    P = a.shape[0]
    prod = np.sum((a[:, start:stop] * b[:, start:stop]).reshape(P, stop - start, -1), axis=2)
    return float(np.mean(np.sum(prod, axis=1)) * dt)


def expect_inner(a, b):
    """E <a, b> for per-path arrays (P, ...)."""
    a = np.asarray(a)
    P = a.shape[0]
    return float(np.mean(np.sum((a * b).reshape(P, -1), axis=1)))


def mean_and_se(samples):
    s = np.asarray(samples, dtype=float)
    n = s.shape[0]
    se = float(np.std(s, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(s)), se


# -- serialization --------------------------------------------------------

def save_process(process, stem, seed=None, extra=None):
    """Write ``stem.csv`` (path, step, component, value) and ``stem.json``."""
    v = process.values
    P, Np1 = v.shape[:2]
    flat = v.reshape(P, Np1, -1)
    header = {
        "grid": {"t_start": process.grid.t_start, "t_end": process.grid.t_end,
                 "steps": process.grid.steps},
        "seed": seed,
        "n_paths": P,
        "component_shape": list(v.shape[2:]),
        "columns": ["path", "step", "component", "value"],
    }
    if extra:
        header.update(extra)
    with open(f"{stem}.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    with open(f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header["columns"])
        for p in range(P):
            for k in range(Np1):
                for c in range(flat.shape[2]):
                    w.writerow([p, k, c, repr(float(flat[p, k, c]))])


def load_process(stem):
    with open(f"{stem}.json") as fh:
        header = json.load(fh)
    g = header["grid"]
    grid = TimeGrid(g["t_start"], g["t_end"], g["steps"])
    shape = tuple(header["component_shape"])
    ncomp = int(np.prod(shape)) if shape else 1
    flat = np.zeros((header["n_paths"], grid.steps + 1, ncomp))
    with open(f"{stem}.csv", newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for path, step, comp, val in r:
            flat[int(path), int(step), int(comp)] = float(val)
    return AdaptedProcess(grid, flat.reshape((header["n_paths"], grid.steps + 1) + shape)), header
