"""Within-batch cross-modal relation mining and its two losses.

Given unit-normalized image features ``fv`` and text features ``ft`` for a
batch where only row i of both modalities is a known pair, this module:

* aligns the known pairs with a symmetric InfoNCE loss,
* mines additional same-identity relations inside the batch by intersecting
  thresholded intra-modal similarity graphs,
* softens mined off-diagonal relations by a balance factor and turns the
  result into a row-stochastic target distribution,
* matches the predicted cross-modal similarity distribution against that
  target with a KL-divergence loss.

Targets are treated as constants during differentiation; gradients are
returned with respect to the raw feature matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRow
from .validation import (
    as_features,
    check_same_dim,
    check_same_shape,
    check_soften_factor,
    check_temperature,
    row_log_softmax,
    row_softmax,
)


@dataclass
class LossWithGrad:
    """Scalar loss with analytic gradients w.r.t. both feature matrices."""

    value: float
    grad_v: np.ndarray
    grad_t: np.ndarray

    @classmethod
    def zero(cls, b: int, d: int) -> "LossWithGrad":
        return cls(0.0, np.zeros((b, d)), np.zeros((b, d)))


def cosine_sim_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity of unit-norm rows, clamped to [-1, 1]."""
    a = as_features(a, "a")
    b = as_features(b, "b")
    check_same_dim(a, b)
    return np.clip(a @ b.T, -1.0, 1.0)


def infonce_loss(fv, ft, tau: float) -> LossWithGrad:
    """Symmetric InfoNCE over the diagonal pairing.

    Both directions (text queries against image keys and vice versa) are
    cross-entropies of the row softmax of ``sim/tau`` against the diagonal.
    """
    tau = check_temperature(tau)
    fv = as_features(fv, "fv")
    ft = as_features(ft, "ft")
    check_same_shape(fv, ft, "fv/ft")
    b = fv.shape[0]

    logits_t2v = ft @ fv.T / tau
    logits_v2t = fv @ ft.T / tau
    p_t2v = row_softmax(logits_t2v)
    p_v2t = row_softmax(logits_v2t)

    diag = np.arange(b)
    value = (
        -row_log_softmax(logits_t2v)[diag, diag].mean()
        - row_log_softmax(logits_v2t)[diag, diag].mean()
    )

    # d(-1/B sum log p_ii)/dZ = (P - I)/B for each direction
    eye = np.eye(b)
    dz1 = (p_t2v - eye) / b
    dz2 = (p_v2t - eye) / b
    grad_t = dz1 @ fv / tau + dz2.T @ fv / tau
    grad_v = dz1.T @ ft / tau + dz2 @ ft / tau
    return LossWithGrad(float(value), grad_v, grad_t)


def binarize(sim: np.ndarray, th: float) -> np.ndarray:
    """Threshold a square similarity matrix into a binary relation graph.

    Entries strictly above ``th`` become 1; the diagonal is forced to 1
    afterwards because the (i, i) pairing is given, not mined.
    """
    th = float(th)
    if not (-1.0 < th < 1.0):
        raise ValueError(f"threshold must be inside (-1, 1), got {th}")
    out = np.asarray(sim) > th
    np.fill_diagonal(out, True)
    return out


def intersect(mv: np.ndarray, mt: np.ndarray) -> np.ndarray:
    """Entrywise AND of two binary relation graphs."""
    check_same_shape(np.asarray(mv), np.asarray(mt), "relation graphs")
    return np.asarray(mv, dtype=bool) & np.asarray(mt, dtype=bool)


def soften_targets(mvt: np.ndarray, lam: float) -> np.ndarray:
    """Down-weight mined off-diagonal relations and mask non-relations.

    Returns ``I + lam * (M - I)`` with every exact-zero entry replaced by
    ``-inf``.  The exact-zero test is safe because the input is binary, so
    off-diagonal entries are exactly ``lam`` or exactly 0.
    """
    lam = check_soften_factor(lam)
    m = np.asarray(mvt, dtype=np.float64)
    eye = np.eye(m.shape[0], m.shape[1])
    q = eye + lam * (m - eye)
    q[q == 0.0] = -np.inf
    return q


def target_distribution(q_raw: np.ndarray) -> np.ndarray:
    """Row-wise softmax treating ``-inf`` as excluded (exact zero mass)."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    finite = np.isfinite(q_raw)
    empty = np.flatnonzero(~finite.any(axis=1))
    if empty.size:
        raise EmptyRow(f"row {int(empty[0])} has no finite target entry")
    return row_softmax(q_raw)


def _kl_direction(logits: np.ndarray, q: np.ndarray, eps: float):
    """Mean over rows of sum_j p log(p / (q + eps)) with p = softmax(logits).

    Returns (value, d value / d logits).
    """
    b = logits.shape[0]
    logp = row_log_softmax(logits)
    p = np.exp(logp)
    g = logp - np.log(q + eps)
    value = float((p * g).sum(axis=1).mean())
    # per row: dF/dz_k = p_k (g_k - sum_j p_j g_j)
    inner = (p * g).sum(axis=1, keepdims=True)
    dz = p * (g - inner) / b
    return value, dz


def sdm_loss(fv, ft, q: np.ndarray, tau: float, eps: float = 1e-8) -> LossWithGrad:
    """Similarity-distribution matching loss, summed over both directions.

    The predicted distribution is the row softmax of the cross-modal cosine
    similarities divided by ``tau``; the loss is the mean-over-rows KL
    divergence ``sum p log(p / (q + eps))`` for the image->text direction plus
    the mirrored text->image direction.  ``q`` is held constant.
    """
    tau = check_temperature(tau)
    fv = as_features(fv, "fv")
    ft = as_features(ft, "ft")
    check_same_shape(fv, ft, "fv/ft")
    q = np.asarray(q, dtype=np.float64)
    check_same_shape(np.empty((fv.shape[0], ft.shape[0])), q, "q against batch")

    z_v2t = fv @ ft.T / tau
    z_t2v = ft @ fv.T / tau
    val_v, dz_v = _kl_direction(z_v2t, q, eps)
    val_t, dz_t = _kl_direction(z_t2v, q, eps)

    grad_v = dz_v @ ft / tau + dz_t.T @ ft / tau
    grad_t = dz_v.T @ fv / tau + dz_t @ fv / tau
    return LossWithGrad(val_v + val_t, grad_v, grad_t)


def batch_relation_loss(fv, ft, th: float, lam: float, tau: float,
                        eps: float = 1e-8) -> tuple[LossWithGrad, np.ndarray]:
    """Full within-batch pipeline: mine, soften, match distributions.

    Returns the loss and the mined binary relation matrix (diagonal forced),
    which callers use for association-precision reporting.
    """
    fv = as_features(fv, "fv")
    ft = as_features(ft, "ft")
    mv = cosine_sim_matrix(fv, fv)
    mt = cosine_sim_matrix(ft, ft)
    mined = intersect(binarize(mv, th), binarize(mt, th))
    q = target_distribution(soften_targets(mined, lam))
    return sdm_loss(fv, ft, q, tau, eps), mined
