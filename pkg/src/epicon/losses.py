"""All training loss terms and their analytic gradients.

Four terms combine into the meta-training objective
``total = ce + lambda1 * inter + lambda2 * intra + forget``:

* ``episode_ce_loss`` — cross-entropy of a softmax over negative squared
  euclidean distances from query embeddings to class prototypes.
* ``inter_class_loss`` — a cross-view prototype contrastive term. The
  positive pair of class i is the cosine of its two view prototypes; the
  denominator sums, over both views, the similarities of view-1 prototype i
  to every *other* class j. The positive pair is deliberately not part of
  the denominator, so the term can go negative; the InfoNCE-style variant
  that adds it back is available behind ``include_positive``.
* ``intra_class_loss`` — temperature-scaled cosine softmax pulling each
  query toward its class's hybrid prototype.
* ``forget_loss`` — replay alignment between the current prediction matrix
  A and a stored historical matrix H: mean over classes of the negative log
  row cosine plus the entropy of the per-class confidence-mass shares, plus
  a constant offset delta.

Every ``*_grad`` companion returns the loss value together with exact
gradients with respect to its array inputs; the finite-difference suite in
the tests pins them down. Gradients never flow into H (a historical
constant) or through a clamped cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .exceptions import InvalidArgument, ShapeMismatch, ZeroVectorError

FORGET_NORMS = ("row", "global")


@dataclass
class LossConfig:
    """Temperatures, weights, and the replay-loss knobs.

    kappa and tau are the inter/intra softmax temperatures; lambda1 and
    lambda2 weight the inter/intra terms in the total objective; delta is
    the constant added to the replay term; cos_floor clamps the cosine
    inside its logarithm away from zero.
    """

    kappa: float = 0.1
    tau: float = 0.1
    lambda1: float = 2.0
    lambda2: float = 1.0
    delta: float = 0.1
    cos_floor: float = 1e-6
    inter_include_positive: bool = False
    forget_norm: str = "row"

    def __post_init__(self):
        if self.kappa <= 0 or self.tau <= 0:
            raise InvalidArgument("temperatures must be strictly positive")
        if self.delta < 0:
            raise InvalidArgument("delta must be >= 0")
        if not 0.0 < self.cos_floor < 1.0:
            raise InvalidArgument("cos_floor must lie in (0, 1)")
        if self.forget_norm not in FORGET_NORMS:
            raise InvalidArgument(f"forget_norm must be one of {FORGET_NORMS}")


@dataclass
class PredictionMatrix:
    """True-class softmax probabilities, entry (n, q) for class n's q-th query."""

    values: np.ndarray  # (N, Q) in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch("prediction matrix must be 2-d (N, Q)")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise InvalidArgument("prediction matrix entries must lie in [0, 1]")

    @property
    def n_way(self) -> int:
        return self.values.shape[0]

    @property
    def q_query(self) -> int:
        return self.values.shape[1]


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, PredictionMatrix) else np.asarray(m, dtype=np.float64)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors, clamped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch("vectors must have equal length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _check_rows_nonzero(m: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError(f"{what} contains an all-zero row")


def _check_labels(labels: np.ndarray, n_way: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0 or y.min() < 0 or y.max() >= n_way:
        raise InvalidArgument("labels must be nonempty and lie in [0, n_way)")
    return y


# ---------------------------------------------------------------------------
# inter-class contrastive term
# ---------------------------------------------------------------------------


def inter_class_loss_grad(
    p1: np.ndarray,
    p2: np.ndarray,
    kappa: float,
    include_positive: bool = False,
):
    """Loss value plus gradients with respect to both prototype matrices."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape or p1.ndim != 2:
        raise ShapeMismatch("prototype matrices must share shape (N, d)")
    n = p1.shape[0]
    if n < 2:
        raise InvalidArgument("inter-class loss needs at least 2 classes")
    if kappa <= 0:
        raise InvalidArgument("kappa must be strictly positive")
    _check_rows_nonzero(p1, "view-1 prototypes")
    _check_rows_nonzero(p2, "view-2 prototypes")

    c1 = np.clip(K.cos_rows(p1, p1), -1.0, 1.0)
    c2 = np.clip(K.cos_rows(p1, p2), -1.0, 1.0)
    l1 = c1 / kappa
    l2 = c2 / kappa
    diag = np.arange(n)
    mask1 = np.ones((n, n), dtype=bool)
    mask1[diag, diag] = False
    mask2 = mask1 if not include_positive else np.ones((n, n), dtype=bool)

    # per-row logsumexp over the masked union of both views' similarities
    neg_inf = -np.inf
    stack = np.concatenate(
        [np.where(mask1, l1, neg_inf), np.where(mask2, l2, neg_inf)], axis=1
    )
    mx = stack.max(axis=1, keepdims=True)
    w = np.exp(stack - mx)
    denom = w.sum(axis=1, keepdims=True)
    lse = (mx + np.log(denom)).ravel()

    pos = l2[diag, diag]
    loss = float(np.sum(lse - pos))

    w /= denom
    d_c1 = w[:, :n] / kappa
    d_c2 = w[:, n:] / kappa
    d_c2[diag, diag] -= 1.0 / kappa

    g1x, g1p = K.cos_rows_bwd(p1, p1, c1, d_c1)
    g2x, g2p = K.cos_rows_bwd(p1, p2, c2, d_c2)
    return loss, g1x + g1p + g2x, g2p


def inter_class_loss(p1, p2, kappa: float, include_positive: bool = False) -> float:
    loss, _, _ = inter_class_loss_grad(p1, p2, kappa, include_positive)
    return loss


# ---------------------------------------------------------------------------
# intra-class contrastive term
# ---------------------------------------------------------------------------


def intra_class_loss_grad(
    query_embeddings: np.ndarray,
    labels: np.ndarray,
    hybrid: np.ndarray,
    tau: float,
):
    """Loss value plus gradients w.r.t. the queries and hybrid prototypes."""
    z = np.asarray(query_embeddings, dtype=np.float64)
    h = np.asarray(hybrid, dtype=np.float64)
    if tau <= 0:
        raise InvalidArgument("tau must be strictly positive")
    y = _check_labels(labels, h.shape[0])
    if z.shape[0] != y.shape[0]:
        raise ShapeMismatch("one label per query embedding required")
    _check_rows_nonzero(z, "query embeddings")
    _check_rows_nonzero(h, "hybrid prototypes")

    m = z.shape[0]
    c = np.clip(K.cos_rows(z, h), -1.0, 1.0)
    logits = c / tau
    probs = K.row_softmax(logits)
    lse = logits.max(axis=1) + np.log(
        np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)
    )
    loss = float(np.mean(lse - logits[np.arange(m), y]))

    g = probs.copy()
    g[np.arange(m), y] -= 1.0
    g /= m * tau
    dz, dh = K.cos_rows_bwd(z, h, c, g)
    return loss, dz, dh


def intra_class_loss(query_embeddings, labels, hybrid, tau: float) -> float:
    loss, _, _ = intra_class_loss_grad(query_embeddings, labels, hybrid, tau)
    return loss


# ---------------------------------------------------------------------------
# euclidean-softmax classification pieces
# ---------------------------------------------------------------------------


def _euclid_log_softmax(z: np.ndarray, protos: np.ndarray):
    d = K.sqdist(z, protos)
    logits = -d
    mx = logits.max(axis=1, keepdims=True)
    lse = (mx + np.log(np.exp(logits - mx).sum(axis=1, keepdims=True))).ravel()
    return logits, lse


def episode_ce_loss_grad(query_embeddings, labels, protos):
    """Mean cross-entropy over queries plus gradients."""
    z = np.asarray(query_embeddings, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    y = _check_labels(labels, p.shape[0])
    if z.shape[0] != y.shape[0]:
        raise ShapeMismatch("one label per query embedding required")
    m = z.shape[0]
    logits, lse = _euclid_log_softmax(z, p)
    loss = float(np.mean(lse - logits[np.arange(m), y]))

    g = K.row_softmax(logits)
    g[np.arange(m), y] -= 1.0
    g /= m
    dz, dp = K.sqdist_bwd(z, p, -g)
    return loss, dz, dp


def episode_ce_loss(query_embeddings, labels, protos) -> float:
    loss, _, _ = episode_ce_loss_grad(query_embeddings, labels, protos)
    return loss


def _class_index_table(labels: np.ndarray, n_way: int) -> np.ndarray:
    """(N, Q) row positions of each class's queries, in appearance order."""
    groups = [np.flatnonzero(labels == c) for c in range(n_way)]
    counts = {g.size for g in groups}
    if len(counts) != 1:
        raise ShapeMismatch("every class needs the same number of queries")
    return np.stack(groups)


def prediction_matrix(query_embeddings, labels, protos) -> PredictionMatrix:
    """True-class euclidean-softmax probability per query, shaped (N, Q)."""
    z = np.asarray(query_embeddings, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    y = _check_labels(labels, p.shape[0])
    idx = _class_index_table(y, p.shape[0])
    probs = K.row_softmax(-K.sqdist(z, p))
    classes = np.arange(p.shape[0])[:, None]
    return PredictionMatrix(probs[idx, classes])


def prediction_matrix_vjp(query_embeddings, labels, protos, g_matrix):
    """Pull a gradient on the (N, Q) matrix back to queries and prototypes."""
    z = np.asarray(query_embeddings, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    y = _check_labels(labels, p.shape[0])
    g = _values(g_matrix)
    idx = _class_index_table(y, p.shape[0])
    probs = K.row_softmax(-K.sqdist(z, p))

    g_probs = np.zeros_like(probs)
    classes = np.arange(p.shape[0])[:, None]
    g_probs[idx, classes] = g
    inner = (g_probs * probs).sum(axis=1, keepdims=True)
    d_logits = probs * (g_probs - inner)
    return K.sqdist_bwd(z, p, -d_logits)


# ---------------------------------------------------------------------------
# against-forgetting replay term
# ---------------------------------------------------------------------------


def _row_cosines(a: np.ndarray, h: np.ndarray, norm: str):
    """Rowwise alignment plus the pieces its gradient needs.

    Identical zero rows count as perfectly aligned (cosine 1); a zero row
    against a nonzero one yields 0 and is left to the floor clamp.
    """
    na = np.linalg.norm(a, axis=1)
    nh = np.linalg.norm(h, axis=1)
    dots = np.einsum("ij,ij->i", a, h)
    if norm == "row":
        scale = na * nh
    else:
        scale = np.full(a.shape[0], np.linalg.norm(a) * np.linalg.norm(h))
    both_zero = (na == 0.0) & (nh == 0.0)
    cos = np.ones_like(dots)
    ok = scale > 0.0
    cos[ok] = dots[ok] / scale[ok]
    cos[~ok & ~both_zero] = 0.0
    return cos, dots, na, nh


def forget_loss_grad(
    a,
    h,
    delta: float,
    cos_floor: float,
    norm: str = "row",
):
    """Replay-alignment loss plus its gradient with respect to A.

    H is treated as a constant. Rows clamped by the cosine floor (or sitting
    exactly at cosine 1) contribute zero gradient, as do classes with zero
    confidence-mass share.
    """
    av = _values(a)
    hv = _values(h)
    if av.shape != hv.shape or av.ndim != 2:
        raise ShapeMismatch("A and H must share shape (N, Q)")
    if norm not in FORGET_NORMS:
        raise InvalidArgument(f"norm must be one of {FORGET_NORMS}")
    if delta < 0 or not 0.0 < cos_floor < 1.0:
        raise InvalidArgument("need delta >= 0 and cos_floor in (0, 1)")
    n = av.shape[0]

    cos, dots, na, nh = _row_cosines(av, hv, norm)
    clamped = np.clip(cos, cos_floor, 1.0)

    total = av.sum()
    shares = av.sum(axis=1) / total if total > 0 else np.zeros(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_shares = np.where(shares > 0, np.log(np.maximum(shares, 1e-300)), 0.0)
    entropy_terms = -shares * log_shares

    loss = float((-np.log(clamped)).sum() / n + entropy_terms.sum() / n + delta)

    grad = np.zeros_like(av)
    active = (cos > cos_floor) & (cos < 1.0)
    if norm == "row":
        ok = active & (na > 0) & (nh > 0)
        rows = np.flatnonzero(ok)
        if rows.size:
            coef = -1.0 / (n * clamped[rows])
            inv = 1.0 / (na[rows] * nh[rows])
            grad[rows] = coef[:, None] * (
                hv[rows] * inv[:, None]
                - cos[rows][:, None] * av[rows] / (na[rows] ** 2)[:, None]
            )
    else:
        ga = np.linalg.norm(av)
        gh = np.linalg.norm(hv)
        if ga > 0 and gh > 0:
            coef = np.where(active, -1.0 / (n * clamped), 0.0)
            grad += coef[:, None] * hv / (ga * gh)
            grad -= ((coef * dots).sum() / (ga**3 * gh)) * av
    if total > 0:
        mass = (shares * log_shares).sum()
        col = np.where(shares > 0, (-log_shares + mass) / (n * total), 0.0)
        grad += col[:, None]
    return loss, grad


def forget_loss(a, h, delta: float, cos_floor: float, norm: str = "row") -> float:
    loss, _ = forget_loss_grad(a, h, delta, cos_floor, norm)
    return loss


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------


def total_loss(ce: float, inter: float, intra: float, forget: float, cfg: LossConfig) -> float:
    """ce + lambda1 * inter + lambda2 * intra + forget."""
    parts = (ce, inter, intra, forget)
    if not all(math.isfinite(v) for v in parts):
        raise InvalidArgument(f"non-finite loss input: {parts}")
    return ce + cfg.lambda1 * inter + cfg.lambda2 * intra + forget
