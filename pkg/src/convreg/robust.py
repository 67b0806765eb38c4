"""Scalar and affine building-block estimators.

Median-of-means for heavy-tailed-safe mean estimation, and affine
regression in two flavours: plain least squares, and a gradient-capped
variant whose output Lipschitz constant never exceeds a given budget.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AffineFunc:
    """x -> a @ x + b; Lipschitz constant is |a|."""
    a: np.ndarray
    b: float

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.b = float(self.b)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return float(X @ self.a + self.b)
        return X @ self.a + self.b

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.a))


@dataclass
class MeanEstimate:
    value: float
    delta: float
    m: int


def median_of_means(values, delta, rng):
    """Median of block means over B = min(ceil(8 ln(2/delta)), m) blocks.

    Blocks are contiguous runs of a seeded shuffle; B = 1 reduces exactly
    to the sample mean.
    """
    v = np.asarray(values, dtype=float)
    m = len(v)
    if m == 0:
        raise ValueError("empty input")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    B = min(int(math.ceil(8.0 * math.log(2.0 / delta))), m)
    if B <= 1:
        return MeanEstimate(float(v.mean()), delta, m)
    perm = rng.generator().permutation(m)
    blocks = np.array_split(v[perm], B)
    means = np.array([b.mean() for b in blocks])
    return MeanEstimate(float(np.median(means)), delta, m)


def median_of_means_many(values_2d, delta, rng):
    """Row-wise median_of_means over a (runs, m) array with a shared m.

    One permutation per row, all derived from rng; used by the heavy
    multi-seed test loops.
    """
    V = np.asarray(values_2d, dtype=float)
    runs, m = V.shape
    B = min(int(math.ceil(8.0 * math.log(2.0 / delta))), m)
    if B <= 1:
        return V.mean(axis=1)
    gen = rng.generator()
    keys = gen.random((runs, m))
    order = np.argsort(keys, axis=1)
    shuffled = np.take_along_axis(V, order, axis=1)
    edges = np.linspace(0, m, B + 1).astype(int)
    means = np.stack([shuffled[:, a:b].mean(axis=1)
                      for a, b in zip(edges[:-1], edges[1:])], axis=1)
    return np.median(means, axis=1)


def _design(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([X, np.ones(len(X))]), X


def ols_affine_regression(pairs_or_X, y=None):
    """Exact least-squares affine fit; ridge fallback on rank deficiency.

    Accepts either a list of (x, y) pairs or (X, y) arrays.  Returns
    (AffineFunc, flags) where flags notes a ridge fallback if one fired.
    """
    if y is None:
        X = np.array([p[0] for p in pairs_or_X], dtype=float)
        y = np.array([p[1] for p in pairs_or_X], dtype=float)
    else:
        X = pairs_or_X
        y = np.asarray(y, dtype=float)
    D, X = _design(X)
    m, p = D.shape
    if m < p:
        raise ValueError("need at least d+1 observations")
    flags = {}
    gram = D.T @ D
    rank = np.linalg.matrix_rank(gram, tol=1e-10 * max(1.0, np.abs(gram).max()))
    if rank < p:
        reg = 1e-8 * np.trace(gram) / p
        coef = np.linalg.solve(gram + reg * np.eye(p), D.T @ y)
        flags["ridge_fallback"] = True
    else:
        coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    return AffineFunc(coef[:-1], coef[-1]), flags


def robust_affine_regression(pairs_or_X, y=None, L=1.0, delta=0.05, rng=None):
    """Affine regression with output Lipschitz constant capped at L.

    Plain least squares followed by projecting the gradient onto the
    L-ball (intercept refit at the design mean, then clipped to the
    response range).  L=None or inf disables the cap.  delta and rng are
    part of the interface for confidence-tracked callers; the fit itself
    is deterministic.
    """
    fit, flags = ols_affine_regression(pairs_or_X, y)
    if y is None:
        X = np.array([p[0] for p in pairs_or_X], dtype=float)
        yv = np.array([p[1] for p in pairs_or_X], dtype=float)
    else:
        X = np.asarray(pairs_or_X, dtype=float)
        yv = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if L is not None and np.isfinite(L):
        if L <= 0:
            raise ValueError("L must be > 0")
        norm = fit.lipschitz
        if norm > L:
            a = fit.a * (L / norm)
            b = float(yv.mean() - X.mean(axis=0) @ a)
            b = float(np.clip(b, yv.min() - L, yv.max() + L))
            fit = AffineFunc(a, b)
            flags["gradient_projected"] = True
    return fit, flags
