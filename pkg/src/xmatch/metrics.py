"""Retrieval metrics (CMC Rank-k, mAP, mINP) and association precision.

The primary protocol ranks an image gallery for each text query; the reverse
direction is computed and reported separately.  Similarity ties break toward
the lower gallery index so results are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NoRelevant
from .global_relations import CandidateSets
from .validation import as_features, check_same_dim


@dataclass
class RankingResult:
    """Per query: gallery indices in descending-similarity order plus
    relevance flags aligned to that order."""

    order: np.ndarray
    relevant: Optional[np.ndarray] = None

    @property
    def num_queries(self) -> int:
        return self.order.shape[0]


@dataclass
class MetricsReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    minp: float
    association_precision: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def rank_gallery(queries, gallery, query_labels=None, gallery_labels=None) -> RankingResult:
    """Full similarity sort of the gallery for every query.

    Ties in similarity resolve toward the lower gallery index.  When labels
    are provided, relevance flags are attached for the metric functions.
    """
    q = as_features(queries, "queries")
    g = as_features(gallery, "gallery")
    check_same_dim(q, g, "queries/gallery")
    sims = q @ g.T
    # stable sort on negated similarity keeps lower index first among ties
    order = np.argsort(-sims, axis=1, kind="stable")
    relevant = None
    if query_labels is not None and gallery_labels is not None:
        ql = np.asarray(query_labels)
        gl = np.asarray(gallery_labels)
        if ql.shape != (q.shape[0],) or gl.shape != (g.shape[0],):
            raise DimensionMismatch("label lengths disagree with feature counts")
        relevant = gl[order] == ql[:, None]
    return RankingResult(order=order, relevant=relevant)


def _require_relevant(r: RankingResult) -> np.ndarray:
    if r.relevant is None:
        raise NoRelevant(None, "ranking has no relevance flags; pass labels to rank_gallery")
    empty = np.flatnonzero(~r.relevant.any(axis=1))
    if empty.size:
        raise NoRelevant(int(empty[0]))
    return r.relevant


def cmc(r: RankingResult, ks=(1, 5, 10)) -> dict[int, float]:
    """Rank-k: percentage of queries whose first relevant hit is within top k."""
    rel = _require_relevant(r)
    first_hit = rel.argmax(axis=1)  # first True per row (rows verified non-empty)
    return {int(k): float(100.0 * np.mean(first_hit < k)) for k in ks}


def mean_ap(r: RankingResult) -> float:
    """Mean over queries of average precision across relevant items."""
    rel = _require_relevant(r)
    n = rel.shape[1]
    precision_at = np.cumsum(rel, axis=1) / np.arange(1, n + 1)
    ap = (precision_at * rel).sum(axis=1) / rel.sum(axis=1)
    return float(100.0 * ap.mean())


def mean_inp(r: RankingResult) -> float:
    """Mean inverse negative penalty: relevant count over the rank of the
    hardest (last) relevant item, averaged over queries."""
    rel = _require_relevant(r)
    n = rel.shape[1]
    last_pos = n - 1 - rel[:, ::-1].argmax(axis=1)  # index of last True
    inp = rel.sum(axis=1) / (last_pos + 1)
    return float(100.0 * inp.mean())


def association_counts(mined, labels, batch_labels=None) -> tuple[int, int]:
    """(correct, total) over mined cross-modal pairs, self pairs excluded.

    ``mined`` is either a :class:`CandidateSets` (dataset-level mining; pairs
    are (self index, candidate) scored with dataset ``labels``) or a binary
    within-batch relation matrix (pairs are its off-diagonal ones, scored with
    ``batch_labels``, or ``labels`` when those are omitted).
    """
    labels = np.asarray(labels)
    correct = total = 0
    if isinstance(mined, CandidateSets):
        for i, cand in enumerate(mined.sets):
            own = mined.self_indices[i]
            others = cand[cand != own]
            total += others.size
            correct += int(np.sum(labels[others] == labels[own]))
    else:
        m = np.asarray(mined, dtype=bool)
        row_labels = labels if batch_labels is None else np.asarray(batch_labels)
        if m.shape != (row_labels.size, row_labels.size):
            raise DimensionMismatch(
                f"relation matrix {m.shape} disagrees with {row_labels.size} labels")
        off = m.copy()
        np.fill_diagonal(off, False)
        ii, jj = np.nonzero(off)
        total = ii.size
        correct = int(np.sum(row_labels[ii] == row_labels[jj]))
    return correct, total


def association_precision(mined, labels, batch_labels=None) -> Optional[float]:
    """Percentage of mined (non-given) pairs whose identities agree.

    Returns ``None`` when nothing beyond the forced self pairs was mined,
    since a precision over zero pairs is undefined.
    """
    correct, total = association_counts(mined, labels, batch_labels)
    if total == 0:
        return None
    return 100.0 * correct / total


def evaluate_retrieval(image_feats, text_feats, labels,
                       association: Optional[float] = None) -> dict[str, MetricsReport]:
    """Both-direction retrieval report for paired, labeled feature matrices."""
    labels = np.asarray(labels)

    def one_direction(queries, gallery):
        r = rank_gallery(queries, gallery, labels, labels)
        ranks = cmc(r, (1, 5, 10))
        return MetricsReport(rank1=ranks[1], rank5=ranks[5], rank10=ranks[10],
                             map=mean_ap(r), minp=mean_inp(r),
                             association_precision=association)

    return {
        "text_to_image": one_direction(text_feats, image_feats),
        "image_to_text": one_direction(image_feats, text_feats),
    }


def metrics_table(reports: dict[str, MetricsReport]) -> str:
    """Plain-text table with the conventional column layout."""
    lines = [f"{'direction':<14}{'R1':>8}{'R5':>8}{'R10':>8}{'mAP':>8}{'mINP':>8}"]
    for name, rep in reports.items():
        lines.append(
            f"{name:<14}{rep.rank1:>8.2f}{rep.rank5:>8.2f}{rep.rank10:>8.2f}"
            f"{rep.map:>8.2f}{rep.minp:>8.2f}")
    return "\n".join(lines)


def report_to_json(reports: dict[str, MetricsReport],
                   association: Optional[float] = None) -> str:
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    if association is not None:
        payload["association_precision"] = association
    return json.dumps(payload, indent=2)
