"""Command-line surface: synth, train, eval, mine, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Flags override values from an optional JSON config file, which overrides the
built-in defaults; reports are written to timestamped files and never
overwrite previous runs.  ``XMATCH_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as xio
from .errors import (
    DataFormatError,
    DegenerateRow,
    DimensionMismatch,
    EmptyRow,
    InvalidConfig,
    IoFailure,
    MissingCheckpoint,
    NonFiniteTerm,
    NonFiniteValue,
    XMatchError,
    ZeroRow,
)
from .global_relations import MemoryBank, mine_candidates
from .metrics import association_precision, evaluate_retrieval, metrics_table, report_to_json
from .model import (
    ABLATION_TERMS,
    GRAD_CHECK_LOSSES,
    CrossModalAdapter,
    HyperParams,
    LinearAdapter,
    grad_check,
)

USAGE_ERRORS = (InvalidConfig,)
DATA_ERRORS = (DataFormatError, IoFailure, MissingCheckpoint, DimensionMismatch)
NUMERIC_ERRORS = (NonFiniteValue, NonFiniteTerm, ZeroRow, DegenerateRow, EmptyRow)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _limit_threads() -> None:
    raw = os.environ.get("XMATCH_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"XMATCH_THREADS must be an integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=max(1, n))


def _add_hyperparams(parser: argparse.ArgumentParser, suppress: bool) -> None:
    hp = HyperParams()
    d = argparse.SUPPRESS if suppress else None

    def add(flag, default, typ, help_):
        parser.add_argument(flag, type=typ, default=d if suppress else default, help=help_)

    add("--temperature", hp.temperature, float, "softmax temperature of all matching losses")
    add("--sim-threshold", hp.sim_threshold, float, "similarity cutoff for relation mining")
    parser.add_argument("--global-sim-threshold", type=float,
                        default=argparse.SUPPRESS if suppress else None,
                        help="mining cutoff for the global stage (defaults to --sim-threshold)")
    add("--soften-factor", hp.soften_factor, float,
        "weight on mined off-diagonal relations in the targets")
    add("--bank-momentum", hp.bank_momentum, float, "memory bank smoothing factor")
    add("--top-k", hp.top_k, int, "bank neighbours considered per anchor image")
    add("--kl-eps", hp.kl_eps, float, "stability constant inside the KL logarithm")
    add("--mask-ratio", hp.mask_ratio, float, "fraction of coordinates zeroed per perturbed row")
    add("--jitter-sigma", hp.jitter_sigma, float, "gaussian jitter on surviving coordinates")
    add("--batch-size", hp.batch_size, int, "training batch size")
    add("--epochs", hp.epochs, int, "training epochs")
    add("--lr-start", hp.lr_start, float, "warmup start learning rate")
    add("--lr-peak", hp.lr_peak, float, "peak learning rate after warmup")
    add("--warmup-epochs", hp.warmup_epochs, int, "epochs of linear warmup")
    add("--seed", hp.seed, int, "training seed")
    add("--adam-beta1", hp.adam_beta1, float, "Adam first-moment decay")
    add("--adam-beta2", hp.adam_beta2, float, "Adam second-moment decay")
    add("--adam-eps", hp.adam_eps, float, "Adam denominator constant")
    parser.add_argument("--adaptive-include-self",
                        action="store_true",
                        **({"default": argparse.SUPPRESS} if suppress else {}),
                        help="include the self column in the adaptive-weight softmax")
    parser.add_argument("--asym-mode", choices=("both", "image", "text"),
                        default=argparse.SUPPRESS if suppress else hp.asym_mode,
                        help="which modality gets perturbed for the consistency term")
    parser.add_argument("--ablate",
                        default=argparse.SUPPRESS if suppress else "",
                        help="comma-separated loss terms to disable: " + ",".join(ABLATION_TERMS))
    parser.add_argument("--config",
                        default=argparse.SUPPRESS if suppress else None,
                        help="optional JSON file with hyperparameter values")


def _build_parser(suppress: bool = False) -> _Parser:
    parser = _Parser(prog="xmatch",
                     description=__doc__.splitlines()[0],
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic labeled dataset",
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_synth.add_argument("--identities", type=int, required=True, help="identity count (>= 2)")
    p_synth.add_argument("--per-id", type=int, default=4, help="samples per identity per modality")
    p_synth.add_argument("--dim", type=int, default=64, help="feature dimension (>= 8)")
    p_synth.add_argument("--sigma", type=float, default=0.3,
                         help="intra-identity noise norm on the unit sphere")
    p_synth.add_argument("--seed", type=int, default=0, help="generator seed")
    p_synth.add_argument("--modality-offset", type=float, default=0.1,
                         help="norm of the fixed per-modality offset vector")
    p_synth.add_argument("--modality-rotation", type=float, default=0.0,
                         help="blend toward a fixed random rotation of text centroids (0..1)")
    p_synth.add_argument("--out", required=True, help="output dataset directory")

    p_train = sub.add_parser("train", help="train adapters on a dataset directory",
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_train.add_argument("--data", required=True, help="dataset directory from synth/export")
    p_train.add_argument("--checkpoint-dir", required=True, help="where to write the checkpoint")
    p_train.add_argument("--report-dir", default=None,
                         help="report directory (defaults to the checkpoint dir)")
    _add_hyperparams(p_train, suppress)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_eval.add_argument("--report-dir", default=None,
                        help="report directory (defaults to the checkpoint dir)")

    p_mine = sub.add_parser("mine", help="dump mined candidate sets for a checkpoint",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_mine.add_argument("--data", required=True)
    p_mine.add_argument("--checkpoint", required=True)
    p_mine.add_argument("--out", default=None, help="output JSON path (default: stdout only)")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_grad.add_argument("--loss", default="all",
                        choices=("all",) + GRAD_CHECK_LOSSES, help="loss to check")
    p_grad.add_argument("--seed", type=int, default=0, help="instance seed")
    p_grad.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    return parser


def _resolve_hyperparams(args_ns, explicit_ns) -> HyperParams:
    """defaults < JSON config < explicitly passed flags."""
    values = HyperParams().to_dict()
    config_path = getattr(args_ns, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {config_path} is not valid JSON: {exc}") from exc
        known = set(values)
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"config has unknown keys: {sorted(unknown)}")
        values.update(raw)

    explicit = vars(explicit_ns)
    for field in list(values):
        if field in explicit:
            values[field] = explicit[field]

    ablate = getattr(args_ns, "ablate", "") or ""
    if "ablate" in explicit:
        ablate = explicit["ablate"] or ""
    for term in filter(None, (t.strip() for t in ablate.split(","))):
        if term not in ABLATION_TERMS:
            raise InvalidConfig(f"unknown ablation term {term!r}; valid: {ABLATION_TERMS}")
        values[f"use_{term}"] = False
    return HyperParams.from_dict(values)


def _timestamped(directory: Path, prefix: str) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = directory / f"{prefix}_{stamp}.json"
    counter = 1
    while path.exists():
        path = directory / f"{prefix}_{stamp}-{counter}.json"
        counter += 1
    return path


# --- checkpoint layout -------------------------------------------------------

CKPT_FILES = {
    "image_weight": "adapter_image_weight.emb",
    "image_bias": "adapter_image_bias.emb",
    "text_weight": "adapter_text_weight.emb",
    "text_bias": "adapter_text_bias.emb",
}


def save_checkpoint(directory, est: CrossModalAdapter, step: int, rng_state: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    xio.save_embeddings(est.image_adapter_.weight.astype(np.float32),
                        directory / CKPT_FILES["image_weight"])
    xio.save_embeddings(est.image_adapter_.bias[None, :].astype(np.float32),
                        directory / CKPT_FILES["image_bias"])
    xio.save_embeddings(est.text_adapter_.weight.astype(np.float32),
                        directory / CKPT_FILES["text_weight"])
    xio.save_embeddings(est.text_adapter_.bias[None, :].astype(np.float32),
                        directory / CKPT_FILES["text_bias"])
    sidecar = {
        "step": step,
        "hyperparams": est.hyperparams().to_dict(),
        "rng_state": rng_state,
        "dim": int(est.n_features_in_),
    }
    (directory / "checkpoint.json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(directory) -> tuple[CrossModalAdapter, dict]:
    directory = Path(directory)
    sidecar_path = directory / "checkpoint.json"
    if not sidecar_path.exists():
        raise MissingCheckpoint(f"no checkpoint.json under {directory}")
    sidecar = json.loads(sidecar_path.read_text())
    hp = HyperParams.from_dict(sidecar["hyperparams"])
    est = CrossModalAdapter.from_hyperparams(hp)
    try:
        wv = xio.load_embeddings(directory / CKPT_FILES["image_weight"]).data.astype(np.float64)
        bv = xio.load_embeddings(directory / CKPT_FILES["image_bias"]).data.astype(np.float64)[0]
        wt = xio.load_embeddings(directory / CKPT_FILES["text_weight"]).data.astype(np.float64)
        bt = xio.load_embeddings(directory / CKPT_FILES["text_bias"]).data.astype(np.float64)[0]
    except IoFailure as exc:
        raise MissingCheckpoint(f"checkpoint payload missing under {directory}: {exc}") from exc
    est.image_adapter_ = LinearAdapter(wv, bv)
    est.text_adapter_ = LinearAdapter(wt, bt)
    est.n_features_in_ = int(sidecar["dim"])
    return est, sidecar


def _load_dataset(path) -> xio.DatasetBundle:
    directory = Path(path)
    if not directory.is_dir():
        raise IoFailure(f"dataset directory {directory} does not exist")
    return xio.load_bundle(directory)


def _checkpoint_features(est: CrossModalAdapter, bundle: xio.DatasetBundle):
    if bundle.dim != est.n_features_in_:
        raise MissingCheckpoint(
            f"checkpoint dim {est.n_features_in_} does not match dataset dim {bundle.dim}")
    fv = est.transform(bundle.images, "image")
    ft = est.transform(bundle.texts, "text")
    return fv, ft


# --- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    bundle = xio.generate_synthetic(
        g=args.identities, per_id_img=args.per_id, per_id_txt=args.per_id,
        d=args.dim, sigma=args.sigma, seed=args.seed,
        modality_offset=args.modality_offset,
        modality_rotation=args.modality_rotation)
    manifest = xio.save_bundle(bundle, args.out)
    print(f"wrote {manifest.n} pairs of dim {manifest.d} to {args.out} "
          f"(checksum {manifest.checksum})")
    return 0


def cmd_train(args, explicit) -> int:
    hp = _resolve_hyperparams(args, explicit)
    bundle = _load_dataset(args.data)
    est = CrossModalAdapter.from_hyperparams(hp)
    est.fit_bundle(bundle)
    report = est.report_

    save_checkpoint(args.checkpoint_dir, est, step=len(report.epochs), rng_state=est.rng_state_)
    report_dir = Path(args.report_dir or args.checkpoint_dir)
    report_path = _timestamped(report_dir, "train_report")
    report_path.write_text(json.dumps(report.to_dict(), indent=2))

    for rec in report.epochs:
        prec = f"{rec.association_precision:.2f}" if rec.association_precision is not None else "n/a"
        print(f"epoch {rec.epoch:3d}  total {rec.loss_total:10.4f}  "
              f"assoc-precision {prec}  lr {rec.learning_rate:.2e}")
    if report.final_metrics:
        print(metrics_table(report.final_metrics))
    print(f"checkpoint: {args.checkpoint_dir}")
    print(f"report: {report_path}")
    return 0


def cmd_eval(args) -> int:
    est, _ = load_checkpoint(args.checkpoint)
    bundle = _load_dataset(args.data)
    fv, ft = _checkpoint_features(est, bundle)

    hp = est.hyperparams()
    bank = MemoryBank(fv, "image")
    cands = mine_candidates(fv, bank, hp.top_k, hp.effective_global_threshold,
                            np.arange(bundle.n))
    assoc = association_precision(cands, bundle.labels)
    reports = evaluate_retrieval(fv, ft, bundle.labels, association=assoc)

    table = metrics_table(reports)
    print(table)
    print(f"association precision: {assoc:.2f}" if assoc is not None
          else "association precision: n/a (nothing mined)")

    report_dir = Path(args.report_dir or args.checkpoint)
    report_path = _timestamped(report_dir, "eval_report")
    report_path.write_text(report_to_json(reports, association=assoc))
    txt_path = report_path.with_suffix(".txt")
    txt_path.write_text(table + "\n")
    print(f"report: {report_path}")
    return 0


def cmd_mine(args) -> int:
    est, _ = load_checkpoint(args.checkpoint)
    bundle = _load_dataset(args.data)
    fv, _ = _checkpoint_features(est, bundle)

    hp = est.hyperparams()
    bank = MemoryBank(fv, "image")
    cands = mine_candidates(fv, bank, hp.top_k, hp.effective_global_threshold,
                            np.arange(bundle.n))
    assoc = association_precision(cands, bundle.labels)
    payload = {
        "candidate_sets": [s.tolist() for s in cands.sets],
        "association_precision": assoc,
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    sizes = [len(s) for s in cands.sets]
    print(f"mined {sum(sizes) - bundle.n} non-self pairs over {bundle.n} anchors; "
          f"precision {assoc:.2f}" if assoc is not None else
          f"mined 0 non-self pairs over {bundle.n} anchors; precision n/a")
    return 0


def cmd_gradcheck(args) -> int:
    losses = GRAD_CHECK_LOSSES if args.loss == "all" else (args.loss,)
    worst = 0.0
    for sel in losses:
        err = grad_check(sel, instance_seed=args.seed, tolerance=args.tolerance)
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{sel:10s} max rel error {err:.3e}  [{status}]")
        worst = max(worst, err)
    if worst >= args.tolerance:
        raise NonFiniteTerm(
            f"gradient check failed: worst error {worst:.3e} >= tolerance {args.tolerance:.1e}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = _build_parser(suppress=False)
    args = parser.parse_args(argv)
    explicit = _build_parser(suppress=True).parse_args(argv)

    try:
        _limit_threads()
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, explicit)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "mine":
            return cmd_mine(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        raise InvalidConfig(f"unknown command {args.command!r}")
    except USAGE_ERRORS as exc:
        print(f"xmatch: config error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"xmatch: data error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"xmatch: numeric failure: {exc}", file=sys.stderr)
        return 3
    except XMatchError as exc:
        print(f"xmatch: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
