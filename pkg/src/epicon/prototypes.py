"""Per-view class prototypes and their mixup-style hybrids.

A prototype is the arithmetic mean of a class's support embeddings; the
hybrid prototype of class n is the convex combination
``alpha * P1_n + (1 - alpha) * P2_n`` of the two view prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgument, ShapeMismatch


def class_prototypes(
    support_embeddings: np.ndarray,
    labels: np.ndarray,
    n_way: int,
    k_shot: int,
) -> np.ndarray:
    """Row n is the mean of the k_shot embeddings labeled n."""
    z = np.asarray(support_embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ShapeMismatch("expected (N*K, d) embeddings with one label per row")
    counts = np.bincount(y, minlength=n_way)
    if y.size and (y.min() < 0 or y.max() >= n_way):
        raise InvalidArgument("labels out of range")
    if len(counts) != n_way or not np.all(counts == k_shot):
        raise InvalidArgument("each class needs exactly k_shot support embeddings")
    protos = np.zeros((n_way, z.shape[1]))
    np.add.at(protos, y, z)
    return protos / k_shot


def class_prototypes_vjp(d_protos: np.ndarray, labels: np.ndarray, k_shot: int) -> np.ndarray:
    """Pull a prototype gradient back onto the support embeddings."""
    y = np.asarray(labels, dtype=np.int64)
    return np.asarray(d_protos)[y] / k_shot


def hybrid_prototypes(p1: np.ndarray, p2: np.ndarray, alpha: float) -> np.ndarray:
    """Rowwise convex combination of the two view prototypes."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ShapeMismatch(f"prototype shapes differ: {p1.shape} vs {p2.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * p1 + (1.0 - alpha) * p2


@dataclass
class PrototypeSet:
    """Both per-view prototype matrices plus their hybrid."""

    per_view: tuple[np.ndarray, np.ndarray]
    hybrid: np.ndarray
    alpha: float

    @classmethod
    def from_views(cls, p1: np.ndarray, p2: np.ndarray, alpha: float) -> "PrototypeSet":
        return cls((p1, p2), hybrid_prototypes(p1, p2, alpha), alpha)

    def __post_init__(self):
        p1, p2 = self.per_view
        expected = self.alpha * p1 + (1.0 - self.alpha) * p2
        if not np.allclose(self.hybrid, expected, rtol=0, atol=1e-12):
            raise InvalidArgument("hybrid rows must equal alpha*P1 + (1-alpha)*P2")
