"""Learnable linear adapters over frozen embeddings and the training loop.

The encoders that produced the embeddings are frozen upstream; training
adjusts one linear map per modality, ``f = normalize(x W^T + b)``, under the
combined objective (contrastive alignment, within-batch relation matching,
global relation matching, asymmetric consistency).  All arithmetic is float64
and every run is bitwise reproducible for a fixed seed.

:class:`CrossModalAdapter` wraps the loop behind the scikit-learn estimator
API so the trained maps compose with standard pipelines.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .asymmetry import LossBundle, PerturbConfig, consistency_loss, perturb, total_loss
from .batch_relations import (
    LossWithGrad,
    batch_relation_loss,
    infonce_loss,
    sdm_loss,
    target_distribution,
    soften_targets,
)
from .errors import DegenerateOutputRow, InvalidConfig, MissingCheckpoint
from .global_relations import (
    MemoryBank,
    build_extended_similarity,
    global_sdm_loss,
    global_targets,
    mine_candidates,
)
from .io import DatasetBundle, l2_normalize
from .metrics import MetricsReport, association_counts, evaluate_retrieval
from .optim import AdamState, lr_schedule
from .validation import as_features, check_same_shape

ABLATION_TERMS = ("itc", "lrc", "gsrc", "iascl")


@dataclass
class HyperParams:
    """Every scalar knob of the training objective and loop.

    ``use_itc``/``use_lrc``/``use_gsrc``/``use_iascl`` switch the four loss
    terms (base contrastive alignment, within-batch relation matching, global
    relation matching, asymmetric consistency); disabling a term removes its
    contribution exactly.
    """

    temperature: float = 0.02
    sim_threshold: float = 0.7
    global_sim_threshold: Optional[float] = None  # falls back to sim_threshold
    soften_factor: float = 0.5
    bank_momentum: float = 0.2
    top_k: int = 8
    kl_eps: float = 1e-8
    mask_ratio: float = 0.5
    jitter_sigma: float = 0.05
    batch_size: int = 64
    epochs: int = 15
    lr_start: float = 1e-6
    lr_peak: float = 1e-5
    warmup_epochs: int = 5
    seed: int = 0
    use_itc: bool = True
    use_lrc: bool = True
    use_gsrc: bool = True
    use_iascl: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    adaptive_include_self: bool = False
    asym_mode: str = "both"  # which side gets perturbed: both | image | text

    def validate(self) -> "HyperParams":
        if self.temperature <= 0:
            raise InvalidConfig(f"temperature must be > 0, got {self.temperature}")
        for name, th in (("sim_threshold", self.sim_threshold),
                         ("global_sim_threshold", self.global_sim_threshold)):
            if th is not None and not (-1.0 < th < 1.0):
                raise InvalidConfig(f"{name} must be inside (-1, 1), got {th}")
        if not (0.0 < self.soften_factor < 1.0):
            raise InvalidConfig(f"soften_factor must be in (0, 1), got {self.soften_factor}")
        if not (0.0 < self.bank_momentum <= 1.0):
            raise InvalidConfig(f"bank_momentum must be in (0, 1], got {self.bank_momentum}")
        if self.top_k < 1:
            raise InvalidConfig(f"top_k must be >= 1, got {self.top_k}")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise InvalidConfig(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.jitter_sigma < 0:
            raise InvalidConfig(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if self.batch_size < 2:
            raise InvalidConfig(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise InvalidConfig("epochs and warmup_epochs must be >= 0")
        if self.lr_start < 0 or self.lr_peak <= 0:
            raise InvalidConfig("learning rates must be positive")
        if self.asym_mode not in ("both", "image", "text"):
            raise InvalidConfig(f"asym_mode must be both|image|text, got {self.asym_mode}")
        if self.kl_eps <= 0:
            raise InvalidConfig(f"kl_eps must be > 0, got {self.kl_eps}")
        return self

    @property
    def effective_global_threshold(self) -> float:
        return self.sim_threshold if self.global_sim_threshold is None else self.global_sim_threshold

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**raw).validate()


@dataclass
class LinearAdapter:
    """Per-modality map ``f = normalize(x W^T + b)`` with analytic backward."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "LinearAdapter":
        weight = np.eye(d) + rng.normal(0.0, 1e-3, size=(d, d))
        return cls(weight=weight, bias=np.zeros(d))

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    def _affine(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    def forward(self, x) -> np.ndarray:
        x = as_features(x, "adapter input")
        u = self._affine(x)
        norms = np.linalg.norm(u, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DegenerateOutputRow(int(zero[0]))
        return u / norms[:, None]

    def backward(self, x, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Exact parameter gradients given upstream gradients on the output.

        Row-wise, with u the affine output, r = |u| and y = u/r:
        dL/du = (g - (g . y) y) / r, then dW = du^T x and db = sum du.
        """
        x = as_features(x, "adapter input")
        upstream = np.asarray(upstream, dtype=np.float64)
        u = self._affine(x)
        r = np.linalg.norm(u, axis=1, keepdims=True)
        y = u / r
        du = (upstream - (upstream * y).sum(axis=1, keepdims=True) * y) / r
        return du.T @ x, du.sum(axis=0)


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    loss_contrastive: float
    loss_local: float
    loss_global: float
    loss_consistency: float
    loss_total: float
    association_precision: Optional[float]


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    baseline_metrics: dict[str, MetricsReport]
    final_metrics: dict[str, MetricsReport]
    hyperparams: dict

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "baseline_metrics": {k: v.to_dict() for k, v in self.baseline_metrics.items()},
            "final_metrics": {k: v.to_dict() for k, v in self.final_metrics.items()},
            "hyperparams": self.hyperparams,
        }


def _perturb_seed(seed: int, epoch: int, batch: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, epoch, batch, tag)).generate_state(1)[0])


def _rng_state_ints(rng: np.random.Generator) -> dict:
    """Generator state as plain integers, suitable for a JSON sidecar."""
    raw = rng.bit_generator.state
    return {"bit_generator": raw["bit_generator"],
            "state": int(raw["state"]["state"]),
            "inc": int(raw["state"]["inc"])}


class CrossModalAdapter(BaseEstimator):
    """Scikit-learn style estimator training the per-modality linear adapters.

    Constructor parameters mirror :class:`HyperParams` verbatim (so
    ``get_params``/``set_params`` and grid search work); all validation
    happens in :meth:`fit`.  After fitting, ``transform`` applies the learned
    map of the requested modality and ``report_`` holds the per-epoch log.
    """

    def __init__(self, temperature=0.02, sim_threshold=0.7, global_sim_threshold=None,
                 soften_factor=0.5, bank_momentum=0.2, top_k=8, kl_eps=1e-8,
                 mask_ratio=0.5, jitter_sigma=0.05, batch_size=64, epochs=15,
                 lr_start=1e-6, lr_peak=1e-5, warmup_epochs=5, seed=0,
                 use_itc=True, use_lrc=True, use_gsrc=True, use_iascl=True,
                 adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8,
                 adaptive_include_self=False, asym_mode="both"):
        self.temperature = temperature
        self.sim_threshold = sim_threshold
        self.global_sim_threshold = global_sim_threshold
        self.soften_factor = soften_factor
        self.bank_momentum = bank_momentum
        self.top_k = top_k
        self.kl_eps = kl_eps
        self.mask_ratio = mask_ratio
        self.jitter_sigma = jitter_sigma
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_start = lr_start
        self.lr_peak = lr_peak
        self.warmup_epochs = warmup_epochs
        self.seed = seed
        self.use_itc = use_itc
        self.use_lrc = use_lrc
        self.use_gsrc = use_gsrc
        self.use_iascl = use_iascl
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.adaptive_include_self = adaptive_include_self
        self.asym_mode = asym_mode

    # -- param plumbing -----------------------------------------------------

    def hyperparams(self) -> HyperParams:
        return HyperParams(**self.get_params()).validate()

    @classmethod
    def from_hyperparams(cls, hp: HyperParams) -> "CrossModalAdapter":
        return cls(**hp.to_dict())

    # -- core API -------------------------------------------------------------

    def fit(self, images, texts, labels=None, aug_images=None, aug_texts=None):
        """Train the adapters on paired image/text embeddings.

        Rows of ``images`` and ``texts`` are the known pairs.  ``labels`` are
        never visible to the losses; they only score mining precision for the
        report.  Optional augmented-view matrices replace the synthetic
        embedding-space perturbation for the consistency term.
        """
        hp = self.hyperparams()
        xv = l2_normalize(as_features(images, "images"))
        xt = l2_normalize(as_features(texts, "texts"))
        check_same_shape(xv, xt, "images/texts")
        av = l2_normalize(as_features(aug_images, "aug_images")) if aug_images is not None else None
        at = l2_normalize(as_features(aug_texts, "aug_texts")) if aug_texts is not None else None
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (xv.shape[0],):
                raise InvalidConfig("labels length disagrees with the number of pairs")

        state = _run_training(xv, xt, labels, hp, av, at)
        self.image_adapter_, self.text_adapter_, self.bank_images_, \
            self.bank_texts_, self.report_, self.rng_state_ = state
        self.n_features_in_ = xv.shape[1]
        return self

    def fit_bundle(self, bundle: DatasetBundle) -> "CrossModalAdapter":
        return self.fit(bundle.images, bundle.texts, bundle.labels,
                        bundle.aug_images, bundle.aug_texts)

    def transform(self, X, modality: str = "image") -> np.ndarray:
        """Normalize rows of ``X`` and apply the trained adapter for the
        requested modality."""
        if not hasattr(self, "image_adapter_"):
            raise MissingCheckpoint("estimator is not fitted")
        if modality not in ("image", "text"):
            raise InvalidConfig(f"modality must be image|text, got {modality}")
        x = l2_normalize(as_features(X, "X"))
        if x.shape[1] != self.n_features_in_:
            raise MissingCheckpoint(
                f"input dim {x.shape[1]} disagrees with fitted dim {self.n_features_in_}")
        adapter = self.image_adapter_ if modality == "image" else self.text_adapter_
        return adapter.forward(x)


def _clean_grads(*terms: LossWithGrad | None, b: int, d: int):
    gv = np.zeros((b, d))
    gt = np.zeros((b, d))
    for t in terms:
        if t is not None:
            gv += t.grad_v
            gt += t.grad_t
    return gv, gt


def _run_training(xv, xt, labels, hp: HyperParams, aug_v=None, aug_t=None):
    n, d = xv.shape
    rng = np.random.default_rng(hp.seed)
    adapter_v = LinearAdapter.init(d, rng)
    adapter_t = LinearAdapter.init(d, rng)
    opt = AdamState(params=[adapter_v.weight, adapter_v.bias,
                            adapter_t.weight, adapter_t.bias],
                    beta1=hp.adam_beta1, beta2=hp.adam_beta2, eps=hp.adam_eps)

    bank_v = MemoryBank(adapter_v.forward(xv), "image")
    bank_t = MemoryBank(adapter_t.forward(xt), "text")

    steps_per_epoch = max(1, math.ceil(n / hp.batch_size))
    total_steps = max(1, hp.epochs * steps_per_epoch)
    warmup_steps = hp.warmup_epochs * steps_per_epoch
    th_global = hp.effective_global_threshold

    def metrics_now():
        if labels is None:
            return {}
        return evaluate_retrieval(adapter_v.forward(xv), adapter_t.forward(xt), labels)

    baseline = metrics_now()
    records: list[EpochRecord] = []
    step = 0

    for epoch in range(1, hp.epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(5)  # contrastive, local, global, consistency, total
        assoc_correct = assoc_total = 0
        lr = hp.lr_peak

        for b_idx in range(steps_per_epoch):
            batch = perm[b_idx * hp.batch_size:(b_idx + 1) * hp.batch_size]
            if batch.size == 0:
                continue
            xvb, xtb = xv[batch], xt[batch]
            fv = adapter_v.forward(xvb)
            ft = adapter_t.forward(xtb)

            con = infonce_loss(fv, ft, hp.temperature) if hp.use_itc else None

            loc = None
            if hp.use_lrc:
                loc, mined = batch_relation_loss(
                    fv, ft, th=hp.sim_threshold, lam=hp.soften_factor,
                    tau=hp.temperature, eps=hp.kl_eps)

            glob = None
            cands = None
            if hp.use_gsrc:
                # candidates come from the bank state before this step's update
                cands = mine_candidates(fv, bank_v, hp.top_k, th_global, batch)
                ext = build_extended_similarity(ft, fv, bank_v, cands, batch, bank_t)
                qg = global_targets(ext, include_self=hp.adaptive_include_self)
                glob = global_sdm_loss(ext, qg, hp.temperature, hp.kl_eps)

            cons = None
            if hp.use_iascl:
                if aug_v is not None and aug_t is not None:
                    xvh, xth = aug_v[batch], aug_t[batch]
                else:
                    cfg_v = PerturbConfig(hp.mask_ratio, hp.jitter_sigma,
                                          _perturb_seed(hp.seed, epoch, b_idx, 0))
                    cfg_t = PerturbConfig(hp.mask_ratio, hp.jitter_sigma,
                                          _perturb_seed(hp.seed, epoch, b_idx, 1))
                    xvh = perturb(xvb, cfg_v) if hp.asym_mode in ("both", "image") else xvb
                    xth = perturb(xtb, cfg_t) if hp.asym_mode in ("both", "text") else xtb
                fvh = adapter_v.forward(xvh)
                fth = adapter_t.forward(xth)
                cons = consistency_loss(fvh, fth, hp.temperature, hp.kl_eps,
                                        hp.soften_factor, hp.sim_threshold)

            bundle = total_loss(con, loc, glob, cons, batch.size, d)
            sums += (bundle.contrastive, bundle.local_relation,
                     bundle.global_relation, bundle.consistency, bundle.total)

            gv, gt = _clean_grads(con, loc, glob, b=batch.size, d=d)
            dwv, dbv = adapter_v.backward(xvb, gv)
            dwt, dbt = adapter_t.backward(xtb, gt)
            if cons is not None:
                # the consistency term backpropagates through its own
                # perturbed-input path
                dwvh, dbvh = adapter_v.backward(xvh, cons.grad_v)
                dwth, dbth = adapter_t.backward(xth, cons.grad_t)
                dwv += dwvh
                dbv += dbvh
                dwt += dwth
                dbt += dbth

            lr = lr_schedule(step, hp.lr_start, hp.lr_peak, warmup_steps, total_steps)
            opt.step([dwv, dbv, dwt, dbt], lr)

            bank_v.update(batch, fv, hp.bank_momentum)
            bank_t.update(batch, ft, hp.bank_momentum)

            if labels is not None:
                if cands is not None:
                    c, t = association_counts(cands, labels)
                elif hp.use_lrc:
                    c, t = association_counts(mined, labels, labels[batch])
                else:
                    c = t = 0
                assoc_correct += c
                assoc_total += t
            step += 1

        bank_v.advance_epoch()
        bank_t.advance_epoch()
        precision = 100.0 * assoc_correct / assoc_total if assoc_total else None
        means = sums / steps_per_epoch
        records.append(EpochRecord(
            epoch=epoch, learning_rate=lr,
            loss_contrastive=means[0], loss_local=means[1], loss_global=means[2],
            loss_consistency=means[3], loss_total=means[4],
            association_precision=precision))

    report = TrainReport(epochs=records, baseline_metrics=baseline,
                         final_metrics=metrics_now(), hyperparams=hp.to_dict())
    rng_state = _rng_state_ints(rng)
    return adapter_v, adapter_t, bank_v, bank_t, report, rng_state


def train(bundle: DatasetBundle, hp: HyperParams) -> tuple[CrossModalAdapter, TrainReport]:
    """Functional wrapper: fit an estimator on a bundle, return it with the report."""
    est = CrossModalAdapter.from_hyperparams(hp)
    est.fit_bundle(bundle)
    return est, est.report_


# --------------------------------------------------------------------------
# finite-difference gradient checking harness
# --------------------------------------------------------------------------

GRAD_CHECK_LOSSES = ("quadratic", "itc", "lrc", "gsrc", "iascl", "total")


def _flatten(tensors):
    return np.concatenate([t.ravel() for t in tensors])


def grad_check(loss_selector: str = "total", instance_seed: int = 0,
               tolerance: float = 1e-4, b: int = 6, d: int = 10,
               bank_n: int = 20, tau: float = 0.2, step_size: float = 1e-4) -> float:
    """Max scale-relative error between analytic and central-difference
    parameter gradients on a random small instance.

    Mining structure, targets and perturbation draws are frozen before
    differentiation (targets are constants of the objective; thresholding is
    not smooth), so the checked function is the actual optimized one.
    """
    if tolerance <= 0:
        raise InvalidConfig("tolerance must be > 0")
    if loss_selector not in GRAD_CHECK_LOSSES:
        raise InvalidConfig(f"unknown loss selector {loss_selector!r}")
    rng = np.random.default_rng(instance_seed)

    def unit(shape):
        z = rng.normal(size=shape)
        return z / np.linalg.norm(z, axis=-1, keepdims=True)

    xv, xt = unit((b, d)), unit((b, d))
    adapter_v = LinearAdapter(np.eye(d) + rng.normal(0, 0.05, (d, d)), rng.normal(0, 0.05, d))
    adapter_t = LinearAdapter(np.eye(d) + rng.normal(0, 0.05, (d, d)), rng.normal(0, 0.05, d))
    params = [adapter_v.weight, adapter_v.bias, adapter_t.weight, adapter_t.bias]

    if loss_selector == "quadratic":
        targets = [rng.normal(size=p.shape) for p in params]

        def value():
            return 0.5 * sum(float(np.sum((p - a) ** 2)) for p, a in zip(params, targets))

        analytic = [p - a for p, a in zip(params, targets)]
        return _fd_compare(value, params, analytic, step_size)

    eps = 1e-8
    lam, th = 0.5, 0.3
    fv0, ft0 = adapter_v.forward(xv), adapter_t.forward(xt)

    # frozen structures (targets, mining, perturbations)
    _, mined0 = batch_relation_loss(fv0, ft0, th=th, lam=lam, tau=tau, eps=eps)
    q_local = target_distribution(soften_targets(mined0, lam))
    bank_v = MemoryBank(np.vstack([fv0, unit((bank_n - b, d))]), "image")
    bank_t = MemoryBank(np.vstack([ft0, unit((bank_n - b, d))]), "text")
    batch_idx = np.arange(b)
    cands0 = mine_candidates(fv0, bank_v, k=4, th=0.0, self_indices=batch_idx)
    ext0 = build_extended_similarity(ft0, fv0, bank_v, cands0, batch_idx, bank_t)
    qg0 = global_targets(ext0)
    cfg_v = PerturbConfig(0.3, 0.05, instance_seed * 2 + 1)
    cfg_t = PerturbConfig(0.3, 0.05, instance_seed * 2 + 2)
    xvh, xth = perturb(xv, cfg_v), perturb(xt, cfg_t)

    # perturbed-pair targets, also frozen
    fvh0, fth0 = adapter_v.forward(xvh), adapter_t.forward(xth)
    _, minedh0 = batch_relation_loss(fvh0, fth0, th=th, lam=lam, tau=tau, eps=eps)
    q_asym = target_distribution(soften_targets(minedh0, lam))

    enabled = {
        "itc": loss_selector in ("itc", "total"),
        "lrc": loss_selector in ("lrc", "total"),
        "gsrc": loss_selector in ("gsrc", "total"),
        "iascl": loss_selector in ("iascl", "total"),
    }

    def compute(with_grads: bool):
        fv, ft = adapter_v.forward(xv), adapter_t.forward(xt)
        value = 0.0
        gw = [np.zeros_like(p) for p in params]

        def absorb(term: LossWithGrad, x_v, x_t):
            nonlocal value
            value += term.value
            if with_grads:
                dwv, dbv = adapter_v.backward(x_v, term.grad_v)
                dwt, dbt = adapter_t.backward(x_t, term.grad_t)
                gw[0] += dwv
                gw[1] += dbv
                gw[2] += dwt
                gw[3] += dbt

        if enabled["itc"]:
            absorb(infonce_loss(fv, ft, tau), xv, xt)
        if enabled["lrc"]:
            absorb(sdm_loss(fv, ft, q_local, tau, eps), xv, xt)
        if enabled["gsrc"]:
            ext = build_extended_similarity(ft, fv, bank_v, cands0, batch_idx, bank_t)
            absorb(global_sdm_loss(ext, qg0, tau, eps), xv, xt)
        if enabled["iascl"]:
            fvh, fth = adapter_v.forward(xvh), adapter_t.forward(xth)
            absorb(sdm_loss(fvh, fth, q_asym, tau, eps), xvh, xth)
        return value, gw

    _, analytic = compute(with_grads=True)
    return _fd_compare(lambda: compute(with_grads=False)[0], params, analytic, step_size)


def _fd_compare(value_fn, params, analytic, h: float) -> float:
    """Central finite differences against analytic tensors; returns the max
    scale-relative error (absolute error when a tensor's scale is ~0)."""
    worst = 0.0
    for p, a in zip(params, analytic):
        num = np.zeros_like(p)
        flat_p = p.ravel()
        flat_n = num.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = value_fn()
            flat_p[i] = orig - h
            down = value_fn()
            flat_p[i] = orig
            flat_n[i] = (up - down) / (2.0 * h)
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        err = np.abs(a - num).max(initial=0.0)
        worst = max(worst, err / scale if scale > 1e-8 else err)
    return worst
