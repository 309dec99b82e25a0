"""Finite-dimensional Hilbert space, generator matrices, semigroups, projections."""

import threading
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

GENERATOR_KINDS = ("dirichlet_laplacian_1d", "diagonal_spectrum", "scalar", "custom")


@dataclass(frozen=True)
class ModelSpace:
    """Truncated state space R^dim with the canonical inner product."""

    dim: int
    label: str = ""

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    def basis_vector(self, j):
        e = np.zeros(self.dim)
        e[j] = 1.0
        return e


def build_generator(kind, dim, params=None):
    """Concrete m x m generator matrix.

    ``dirichlet_laplacian_1d`` needs ``h`` (mesh width) and accepts an optional
    diffusivity ``nu``; ``diagonal_spectrum`` needs ``lam`` (list of
    eigenvalues); ``scalar`` needs ``lam`` (a number, dim must be 1 or the
    matrix is lam * I); ``custom`` needs ``matrix``.
    """
    params = dict(params or {})
    dim = int(dim)
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if kind == "dirichlet_laplacian_1d":
        if "h" not in params:
            raise ValueError("dirichlet_laplacian_1d requires params['h']")
        h = float(params["h"])
        if h <= 0:
            raise ValueError("mesh width h must be positive")
        nu = float(params.get("nu", 1.0))
        A = -2.0 * np.eye(dim) + np.eye(dim, k=1) + np.eye(dim, k=-1)
        return nu * A / h**2
    if kind == "diagonal_spectrum":
        if "lam" not in params:
            raise ValueError("diagonal_spectrum requires params['lam']")
        lam = np.asarray(params["lam"], dtype=float).ravel()
        if lam.size != dim:
            raise ValueError(f"need {dim} eigenvalues, got {lam.size}")
        return np.diag(lam)
    if kind == "scalar":
        if "lam" not in params:
            raise ValueError("scalar requires params['lam']")
        return float(params["lam"]) * np.eye(dim)
    if kind == "custom":
        if "matrix" not in params:
            raise ValueError("custom requires params['matrix']")
        A = np.asarray(params["matrix"], dtype=float)
        if A.shape != (dim, dim):
            raise ValueError(f"custom matrix must be {dim}x{dim}, got {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValueError("custom matrix has non-finite entries")
        return A.copy()
    raise ValueError(f"unknown generator kind {kind!r}; expected one of {GENERATOR_KINDS}")


class Semigroup:
    """S(t) = exp(tA) with a thread-safe evaluation cache keyed by t."""

    def __init__(self, generator):
        A = np.asarray(generator, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("generator must be square")
        self.generator = A
        self.dim = A.shape[0]
        self._cache = {}
        self._lock = threading.Lock()

    def __call__(self, t):
        t = float(t)
        if t < 0:
            raise ValueError(f"semigroup evaluated at negative time {t}")
        key = round(t, 14)
        with self._lock:
            S = self._cache.get(key)
            if S is None:
                S = np.eye(self.dim) if t == 0.0 else expm(t * self.generator)
                S.setflags(write=False)
                self._cache[key] = S
        return S

    def adjoint(self, t):
        return self(t).T

    def apply(self, t, v):
        return semigroup_apply(self, t, v)


def semigroup_apply(S, t, v):
    """e^{tA} v for a vector or a stack of row vectors (..., m)."""
    if t < 0:
        raise ValueError(f"semigroup evaluated at negative time {t}")
    M = S(t)
    return np.asarray(v, dtype=float) @ M.T


def projection(rank, dim):
    if rank > dim:
        raise ValueError(f"rank {rank} exceeds dimension {dim}")
    if rank < 0:
        raise ValueError("rank must be non-negative")
    G = np.zeros((dim, dim))
    G[np.arange(rank), np.arange(rank)] = 1.0
    return G


def project(rank, obj):
    """Zero every basis component beyond ``rank``.

    A 1-d array is a vector; anything with two or more axes is a (stack of)
    operator(s) and comes back as Gamma P Gamma.  Stacks of vectors go through
    ``project_vector``.
    """
    obj = np.asarray(obj, dtype=float)
    m = obj.shape[-1]
    if rank > m:
        raise ValueError(f"rank {rank} exceeds dimension {m}")
    if rank < 0:
        raise ValueError("rank must be non-negative")
    out = obj.copy()
    if obj.ndim == 1:
        out[rank:] = 0.0
    else:
        out[..., rank:, :] = 0.0
        out[..., :, rank:] = 0.0
    return out


def project_vector(rank, v):
    v = np.asarray(v, dtype=float)
    if rank > v.shape[-1]:
        raise ValueError(f"rank {rank} exceeds dimension {v.shape[-1]}")
    out = v.copy()
    out[..., rank:] = 0.0
    return out


def lift_generator(A):
    """Generator of O -> S(t) O S(t)^T on row-major vec(O): A (x) I + I (x) A."""
    A = np.asarray(A, dtype=float)
    eye = np.eye(A.shape[0])
    return np.kron(A, eye) + np.kron(eye, A)


class LiftedSemigroup:
    """Semigroup of the lifted generator, evaluated as S(t) (x) S(t)."""

    def __init__(self, base):
        self.base = base
        self.generator = lift_generator(base.generator)
        self.dim = base.dim ** 2
        self._cache = {}
        self._lock = threading.Lock()

    def __call__(self, t):
        key = round(float(t), 14)
        with self._lock:
            M = self._cache.get(key)
            if M is None:
                S = self.base(t)
                M = np.kron(S, S)
                M.setflags(write=False)
                self._cache[key] = M
        return M

    def adjoint(self, t):
        return self(t).T
