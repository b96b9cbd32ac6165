"""Numpy implementations of the hot numeric kernels.

This is the fallback backend; `epicon._kernels._core` is the compiled twin
with identical signatures and semantics. Inputs are assumed to be
C-contiguous float64 (the dispatch layer coerces).

Norms inside the cosine kernels are floored at a tiny positive value so the
division is always defined; callers that must reject zero vectors check
before calling.
"""

import numpy as np

NORM_FLOOR = 1e-30


def sqdist(x, p):
    """Pairwise squared euclidean distances, out[i, j] = ||x_i - p_j||^2."""
    diff = x[:, None, :] - p[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sqdist_bwd(x, p, g):
    """Backward of `sqdist` for upstream gradient g of shape (m, n)."""
    # d||x_i - p_j||^2 / dx_i = 2 (x_i - p_j)
    gs = g.sum(axis=1, keepdims=True)
    dx = 2.0 * (x * gs - g @ p)
    gsp = g.sum(axis=0)[:, None]
    dp = 2.0 * (p * gsp - g.T @ x)
    return dx, dp


def _row_norms(a):
    return np.maximum(np.sqrt(np.einsum("ij,ij->i", a, a)), NORM_FLOOR)


def cos_rows(x, p):
    """Cosine similarity of every x row with every p row, shape (m, n)."""
    nx = _row_norms(x)
    np_ = _row_norms(p)
    return (x @ p.T) / (nx[:, None] * np_[None, :])


def cos_rows_bwd(x, p, c, g):
    """Backward of `cos_rows`; c is the forward output, g the upstream grad."""
    nx = _row_norms(x)
    np_ = _row_norms(p)
    inv = 1.0 / (nx[:, None] * np_[None, :])
    gi = g * inv
    dx = gi @ p - ((g * c).sum(axis=1) / (nx * nx))[:, None] * x
    dp = gi.T @ x - ((g * c).sum(axis=0) / (np_ * np_))[:, None] * p
    return dx, dp


def row_softmax(s):
    """Numerically stable softmax along axis 1."""
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
