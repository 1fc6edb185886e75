"""Information-asymmetric views and the consistency objective.

Raw-input augmentations (flips, crops, token masking) live in the exporter
that produces embedding files; inside this package asymmetry is realized
directly in embedding space: a seeded fraction of coordinates is zeroed per
row, Gaussian jitter is added to the survivors, and the row is renormalized.
The consistency loss runs the within-batch relation pipeline on a perturbed
pair so the model must preserve identity structure under information loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batch_relations import LossWithGrad, batch_relation_loss
from .errors import DegenerateRow, InvalidConfig, NonFiniteTerm
from .validation import as_features


@dataclass
class PerturbConfig:
    """Masking/jitter parameters; a full mask is rejected because a fully
    zeroed row cannot be renormalized."""

    mask_ratio: float = 0.5
    jitter_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mask_ratio < 1.0):
            raise InvalidConfig(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.jitter_sigma < 0.0:
            raise InvalidConfig(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")


def perturb(m, cfg: PerturbConfig) -> np.ndarray:
    """Mask ``floor(mask_ratio * d)`` coordinates per row, jitter the rest,
    renormalize.  Deterministic for a fixed config seed; with zero mask ratio
    and zero jitter the input is returned unchanged.
    """
    x = as_features(m, "features")
    n, d = x.shape
    n_mask = int(np.floor(cfg.mask_ratio * d))
    if n_mask == 0 and cfg.jitter_sigma == 0.0:
        return x.copy()

    rng = np.random.default_rng(cfg.seed)
    out = np.empty_like(x)
    for i in range(n):
        keep = np.ones(d, dtype=bool)
        if n_mask:
            keep[rng.choice(d, size=n_mask, replace=False)] = False
        row = np.where(keep, x[i], 0.0)
        if cfg.jitter_sigma > 0.0:
            row = row + np.where(keep, rng.normal(0.0, cfg.jitter_sigma, size=d), 0.0)
        norm = np.linalg.norm(row)
        if norm == 0.0:
            raise DegenerateRow(i)
        out[i] = row / norm
    return out


def consistency_loss(fv_pert, ft_pert, tau: float, eps: float, lam: float,
                     th: float = 0.7) -> LossWithGrad:
    """Within-batch relation loss evaluated on an asymmetric feature pair.

    Identical to the clean-batch relation loss when the perturbation is the
    identity; gradients are w.r.t. the perturbed features.
    """
    loss, _ = batch_relation_loss(fv_pert, ft_pert, th=th, lam=lam, tau=tau, eps=eps)
    return loss


@dataclass
class LossBundle:
    """The four objective terms and their exact sum.

    ``grad_v``/``grad_t`` are the per-modality sums of the term gradients.
    They are directly usable when every term was evaluated on the same feature
    matrices; the trainer backpropagates the consistency term through its own
    perturbed-input path instead, because that term's gradients live on
    different tensors.
    """

    contrastive: float
    local_relation: float
    global_relation: float
    consistency: float
    total: float
    grad_v: np.ndarray
    grad_t: np.ndarray


def total_loss(contrastive: LossWithGrad | None, local_relation: LossWithGrad | None,
               global_relation: LossWithGrad | None, consistency: LossWithGrad | None,
               b: int, d: int) -> LossBundle:
    """Unweighted sum of the enabled terms; a disabled term contributes
    exactly 0 to the value and to the summed gradients."""
    terms = []
    for t in (contrastive, local_relation, global_relation, consistency):
        t = t if t is not None else LossWithGrad.zero(b, d)
        if not np.isfinite(t.value):
            raise NonFiniteTerm(f"loss term is not finite: {t.value}")
        terms.append(t)
    con, loc, glob, cons = terms
    return LossBundle(contrastive=con.value, local_relation=loc.value,
                      global_relation=glob.value, consistency=cons.value,
                      total=con.value + loc.value + glob.value + cons.value,
                      grad_v=sum(t.grad_v for t in terms),
                      grad_t=sum(t.grad_t for t in terms))
