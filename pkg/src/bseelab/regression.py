"""Least-squares conditional expectations onto scenario-declared bases."""

import itertools

import numpy as np
import scipy.linalg

COND_LIMIT = 1e10


class RankDeficient(RuntimeError):
    def __init__(self, msg, cond=np.inf, step=None):
        super().__init__(msg)
        self.cond = cond
        self.step = step


class PolynomialBasis:
    """Monomials up to ``degree`` in a state process ``state[path, step, q]``."""

    def __init__(self, state, degree=1, label="state", drop_collinear=False):
        state = np.asarray(state, dtype=float)
        if state.ndim == 2:
            state = state[:, :, None]
        if degree not in (1, 2):
            raise ValueError("basis degree must be 1 or 2")
        self.state = state
        self.degree = degree
        self.label = label
        self.drop_collinear = drop_collinear

    @property
    def n_features(self):
        q = self.state.shape[2]
        return 1 + q + (q * (q + 1) // 2 if self.degree == 2 else 0)

    def features(self, k):
        s = self.state[:, k]
        cols = [np.ones(s.shape[0])]
        cols.extend(s[:, i] for i in range(s.shape[1]))
        if self.degree == 2:
            for i, j in itertools.combinations_with_replacement(range(s.shape[1]), 2):
                cols.append(s[:, i] * s[:, j])
        return np.stack(cols, axis=1)


class RotatedBasis:
    """Same span as ``base``: the non-constant features are mixed by a fixed invertible matrix."""

    def __init__(self, base, seed=1):
        self.base = base
        rng = np.random.default_rng(seed)
        n = base.n_features
        self.mix = np.eye(n)
        # the leading constant stays put so centring cannot make the design collinear
        self.mix[1:, 1:] += 0.5 * rng.standard_normal((n - 1, n - 1)) / np.sqrt(max(n - 1, 1))
        self.degree = base.degree
        self.label = base.label + "_rotated"
        self.drop_collinear = getattr(base, "drop_collinear", False)

    @property
    def n_features(self):
        return self.base.n_features

    def features(self, k):
        return self.base.features(k) @ self.mix


class Projector:
    """Orthogonal projection onto the span of the non-degenerate feature columns.

    Columns with (relative) zero spread are dropped; a constant is always
    kept.  Remaining columns are centred and scaled before a reduced QR.
    With ``drop_collinear`` a column-pivoted QR first discards columns that
    are exact linear combinations of earlier ones (relative pivot < 1e-9),
    which happens when the state is driven by fewer increments than it has
    components.
    """

    def __init__(self, features, step=None, cond_limit=COND_LIMIT, drop_collinear=False):
        F = np.asarray(features, dtype=float)
        P = F.shape[0]
        mean = F.mean(axis=0)
        spread = F.std(axis=0)
        scale = np.maximum(np.abs(mean), 1.0)
        keep = spread > 1e-12 * scale
        Z = (F[:, keep] - mean[keep]) / spread[keep]
        design = np.concatenate([np.ones((P, 1)), Z], axis=1)
        if drop_collinear:
            _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
            diag = np.abs(np.diag(r))
            good = np.sort(piv[diag > 1e-9 * diag[0]])
            if 0 not in good:
                good = np.concatenate([[0], good])
            design = design[:, good]
        if design.shape[1] > P:
            raise RankDeficient(f"{design.shape[1]} features for {P} paths", step=step)
        Q, R = np.linalg.qr(design)
        sv = np.linalg.svd(R, compute_uv=False)
        self.cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
        if self.cond > cond_limit:
            raise RankDeficient(f"regression design condition number {self.cond:.3e} exceeds "
                                f"{cond_limit:.1e} at step {step}", cond=self.cond, step=step)
        self.Q = Q
        self.kept = keep
        self.rank = design.shape[1]

    def coefficients(self, target):
        T = np.asarray(target, dtype=float)
        return self.Q.T @ T.reshape(T.shape[0], -1)

    def __call__(self, target):
        T = np.asarray(target, dtype=float)
        flat = T.reshape(T.shape[0], -1)
        return (self.Q @ (self.Q.T @ flat)).reshape(T.shape)
