"""Dataset-wide relation mining anchored on the visual modality.

Momentum-smoothed feature banks store a representation of every training
sample.  Each step, batch images are matched against the image bank to mine
same-identity candidates; the batch similarity matrix is then extended with
the mined bank columns, candidates receive adaptive confidence weights, and a
KL distribution-matching loss aligns predictions with those targets in both
directions (texts against image columns, images against text columns).

Mining always uses the bank state from before the step's update.  Gradients
never flow into bank features: only fresh batch features receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .batch_relations import LossWithGrad, _kl_direction, target_distribution
from .errors import (
    BankEmpty,
    DimensionMismatch,
    IndexOutOfRange,
    InvalidConfig,
    ZeroRow,
)
from .io import EmbeddingMatrix, load_embeddings, save_embeddings
from .validation import as_features, check_same_dim, check_temperature


@dataclass
class MemoryBank:
    """Per-modality momentum feature store covering the whole dataset."""

    features: np.ndarray
    modality: str
    epoch: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionMismatch(f"bank must be 2-D, got {self.features.shape}")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def update(self, indices, feats, alpha: float) -> "MemoryBank":
        """Momentum update: stored <- normalize(alpha*new + (1-alpha)*stored).

        Rows are renormalized after the convex combination so downstream
        cosine similarities stay dot products.  Only the given indices change.
        """
        alpha = float(alpha)
        if not (0.0 < alpha <= 1.0):
            raise InvalidConfig(f"smoothing factor must be in (0, 1], got {alpha}")
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            return self
        if np.unique(indices).size != indices.size:
            raise InvalidConfig("bank update indices must be distinct")
        if indices.min() < 0 or indices.max() >= self.size:
            raise IndexOutOfRange(
                f"indices span [{indices.min()}, {indices.max()}], bank holds {self.size}")
        feats = as_features(feats, "bank update features")
        if feats.shape != (indices.size, self.features.shape[1]):
            raise DimensionMismatch(
                f"features {feats.shape} disagree with {indices.size} indices of dim "
                f"{self.features.shape[1]}")
        mixed = alpha * feats + (1.0 - alpha) * self.features[indices]
        norms = np.linalg.norm(mixed, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ZeroRow(int(indices[zero[0]]), "bank update cancelled a row to zero")
        self.features[indices] = mixed / norms[:, None]
        return self

    def advance_epoch(self) -> None:
        self.epoch += 1

    def save(self, path) -> None:
        """EMB1 payload plus a JSON sidecar recording epoch and modality."""
        path = Path(path)
        save_embeddings(EmbeddingMatrix(self.features.astype(np.float32), self.modality), path)
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps({"epoch": self.epoch, "modality": self.modality}))

    @classmethod
    def load(cls, path) -> "MemoryBank":
        path = Path(path)
        m = load_embeddings(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        return cls(features=m.data, modality=meta["modality"], epoch=int(meta["epoch"]))


@dataclass
class CandidateSets:
    """Per batch row, dataset indices mined as same-identity candidates."""

    sets: list[np.ndarray]
    self_indices: np.ndarray

    def __post_init__(self):
        self.self_indices = np.asarray(self.self_indices, dtype=np.int64)

    def all_indices(self) -> np.ndarray:
        if not self.sets:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(self.sets))


def mine_candidates(batch_feats, bank: MemoryBank, k: int, th: float,
                    self_indices) -> CandidateSets:
    """Top-k bank neighbours above a similarity threshold, self always kept.

    Ties at equal similarity break toward the lower dataset index; the
    row's own dataset index is force-included even when nothing passes the
    threshold.
    """
    if bank.size == 0:
        raise BankEmpty("cannot mine candidates from an empty bank")
    if k < 1:
        raise InvalidConfig(f"top-k size must be >= 1, got {k}")
    batch = as_features(batch_feats, "batch features")
    check_same_dim(batch, bank.features, "batch/bank")
    self_indices = np.asarray(self_indices, dtype=np.int64)
    if self_indices.shape != (batch.shape[0],):
        raise DimensionMismatch("need one self index per batch row")
    if self_indices.min() < 0 or self_indices.max() >= bank.size:
        raise IndexOutOfRange("self indices outside the bank")

    sims = batch @ bank.features.T
    sets = []
    for i in range(batch.shape[0]):
        # stable sort on negated sims keeps lower indices first among ties
        order = np.argsort(-sims[i], kind="stable")[:k]
        kept = order[sims[i][order] > th]
        sets.append(np.unique(np.append(kept, self_indices[i])))
    return CandidateSets(sets=sets, self_indices=self_indices)


@dataclass
class ExtendedSimilarity:
    """Batch-plus-bank similarity block shared by both loss directions.

    Columns are the batch rows in batch order followed by mined bank
    candidates not already in the batch (deduplicated, ascending dataset
    index).  ``values`` holds text-vs-image-column similarities and
    ``values_v2t`` the mirrored image-vs-text-column ones; the corresponding
    column feature stacks are kept so losses can emit analytic gradients for
    the fresh batch features (bank columns stay constant).
    """

    values: np.ndarray
    values_v2t: np.ndarray
    column_map: list[tuple[str, int]]
    j_prime: list[np.ndarray]
    row_v: np.ndarray = field(repr=False)
    row_t: np.ndarray = field(repr=False)
    col_v: np.ndarray = field(repr=False)
    col_t: np.ndarray = field(repr=False)

    @property
    def b(self) -> int:
        return self.values.shape[0]

    @property
    def b1(self) -> int:
        return self.values.shape[1]


def build_extended_similarity(ft, fv, bank: MemoryBank, cands: CandidateSets,
                              batch_dataset_indices,
                              text_bank: Optional[MemoryBank] = None) -> ExtendedSimilarity:
    """Concatenate batch columns with mined bank columns for both modalities.

    ``bank`` supplies image features for mined columns; ``text_bank`` supplies
    the paired text features for the mirrored direction (dataset index j names
    the pair, so the same column map serves both).  Without a text bank the
    mirrored similarities cover only the batch columns' fresh text features,
    which is only valid when no bank column exists.
    """
    fv = as_features(fv, "fv")
    ft = as_features(ft, "ft")
    batch_idx = np.asarray(batch_dataset_indices, dtype=np.int64)
    b = fv.shape[0]
    if ft.shape[0] != b or batch_idx.shape != (b,):
        raise DimensionMismatch("batch features and dataset indices disagree")
    check_same_dim(fv, bank.features, "batch/bank")

    in_batch = set(batch_idx.tolist())
    extras = sorted(set(cands.all_indices().tolist()) - in_batch)
    if extras and text_bank is None:
        raise InvalidConfig("mined bank columns require a text bank for the mirrored direction")

    col_map = [("batch", int(j)) for j in batch_idx]
    col_map += [("bank", int(j)) for j in extras]
    col_of = {j: pos for pos, (_, j) in enumerate(col_map)}

    extra_arr = np.asarray(extras, dtype=np.int64)
    col_v = np.vstack([fv, bank.features[extra_arr]]) if extras else fv
    col_t = np.vstack([ft, text_bank.features[extra_arr]]) if extras else ft

    values = np.clip(ft @ col_v.T, -1.0, 1.0)
    values_v2t = np.clip(fv @ col_t.T, -1.0, 1.0)
    j_prime = [np.unique([col_of[int(j)] for j in cands.sets[i]]) for i in range(b)]
    return ExtendedSimilarity(values=values, values_v2t=values_v2t,
                              column_map=col_map, j_prime=j_prime,
                              row_v=fv, row_t=ft, col_v=col_v, col_t=col_t)


def global_targets(ext: ExtendedSimilarity, include_self: bool = False) -> np.ndarray:
    """Adaptive confidence targets over the extended columns.

    The self column gets weight 1.  Every other candidate column j of row i
    gets ``1 - softmax(sim(anchor image i, candidate image k))_j`` where the
    softmax runs over the row's candidate columns; weakly associated
    candidates therefore receive larger target weight.  Non-candidates are
    ``-inf``.  By default the self column is excluded from the softmax so a
    lone unsupported candidate gets weight 0; ``include_self`` switches to
    summing over the full candidate set.
    """
    b, b1 = ext.b, ext.b1
    q = np.full((b, b1), -np.inf)
    for i in range(b):
        cols = ext.j_prime[i]
        q[i, i] = 1.0
        others = cols[cols != i]
        if others.size == 0:
            continue
        anchor_sims = ext.row_v[i] @ ext.col_v[cols if include_self else others].T
        weights = np.exp(anchor_sims)
        soft = np.exp(ext.row_v[i] @ ext.col_v[others].T) / weights.sum()
        q[i, others] = 1.0 - soft
    return q


def global_sdm_loss(ext: ExtendedSimilarity, qg: np.ndarray, tau: float,
                    eps: float = 1e-8) -> LossWithGrad:
    """Distribution-matching loss over the extended similarity block.

    The target distribution is the row softmax of the finite target entries;
    predictions are row softmaxes of ``values/tau`` over all columns.  The
    text->image term and the mirrored image->text term are summed.  Gradients
    flow to fresh batch features only.
    """
    tau = check_temperature(tau)
    if qg.shape != ext.values.shape:
        raise DimensionMismatch(f"targets {qg.shape} disagree with block {ext.values.shape}")
    q = target_distribution(qg)
    b = ext.b

    val_t, dz_t = _kl_direction(ext.values / tau, q, eps)       # rows: texts
    val_v, dz_v = _kl_direction(ext.values_v2t / tau, q, eps)   # rows: images

    grad_t = dz_t @ ext.col_v / tau
    grad_v = dz_v @ ext.col_t / tau
    # batch columns are the fresh features in batch order; bank columns constant
    grad_v += (dz_t.T @ ext.row_t / tau)[:b]
    grad_t += (dz_v.T @ ext.row_v / tau)[:b]
    return LossWithGrad(val_t + val_v, grad_v, grad_t)
