"""Command-line entry points wiring the pipeline into reproducible runs.

Every command loads an optional JSON experiment config, stamps its outputs
under ``<out>/<config-hash>/``, and is idempotent given identical inputs
and seed. ``dilseg --help`` lists the subcommands; each stage consumes the
previous stage's manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evaluation import DatasetEvaluation, evaluate_case, load_dataset_evaluation
from .experiment import ExperimentConfig
from .networks import Architecture, NetworkSpec, StreamAblation, apply_ablation
from .phantom import generate_dataset
from .preprocess import CropInfo, load_sidecar, preprocess_case, uncrop
from .reporting import write_report
from .stats import build_report
from .training import (
    cross_validate,
    load_checkpoint,
    make_folds,
    predict_volume,
    train_model,
)
from .volumes import LabelVolume, Split, load_image, load_manifest, load_mask, save_manifest, save_volume


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = ExperimentConfig.from_json({**config.to_json(), "seed": args.seed})
    if getattr(args, "arch", None):
        spec = NetworkSpec.from_json({**config.network.to_json(), "architecture": args.arch})
        config.network = spec
    if getattr(args, "out", None):
        config.out_dir = args.out
    if getattr(args, "manifest", None):
        config.manifest = args.manifest
    return config


def _resolve_device(name: str) -> str:
    if name == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    return name


def _stage_dir(config: ExperimentConfig, stage: str) -> Path:
    d = config.run_dir() / stage
    d.mkdir(parents=True, exist_ok=True)
    config.save(config.run_dir() / "config.json")
    return d


def cmd_phantom(args) -> None:
    config = _load_config(args)
    out = _stage_dir(config, "phantom")
    manifest = generate_dataset(config.phantom, config.phantom_cases, config.seed, out)
    print(f"wrote {config.phantom_cases} phantom cases, manifest {manifest}")


def cmd_preprocess(args) -> None:
    config = _load_config(args)
    if not config.manifest:
        raise SystemExit("preprocess requires --manifest (or manifest in config)")
    cases = load_manifest(config.manifest)
    out = _stage_dir(config, "preprocessed")
    processed = [preprocess_case(c, config.preprocess, out, config.hash) for c in cases]
    manifest_path = out / "manifest.json"
    save_manifest(processed, manifest_path)
    print(f"preprocessed {len(processed)} cases -> {manifest_path}")


def cmd_train(args) -> None:
    config = _load_config(args)
    if not config.manifest:
        raise SystemExit("train requires --manifest (or manifest in config)")
    cases = load_manifest(config.manifest, validate=False)
    out = _stage_dir(config, "train")
    device = _resolve_device(args.device)
    torch.manual_seed(config.seed)

    if args.cv:
        summary = cross_validate(config.network, config.train, cases, out, device, config.hash)
        print(f"cross-validation done; fold hash {summary['fold_assignment_hash']}")
        return
    if args.fold is not None:
        assignment = make_folds(cases, config.train.folds, config.seed,
                                config.train.stratify_by_gs)
        train_cases = [c for c in cases if assignment[c.case_id] != args.fold]
        val_cases = [c for c in cases if assignment[c.case_id] == args.fold]
    else:
        train_cases = [c for c in cases if c.split != Split.VAL]
        val_cases = [c for c in cases if c.split == Split.VAL]
    result = train_model(
        config.network, config.train, train_cases, val_cases, out, device, config.hash
    )
    print(
        f"trained {config.network.architecture.value}: "
        f"final train loss {result.final_train_loss:.4f}, "
        f"best val dice {result.best_val_dice:.4f} (epoch {result.best_epoch}), "
        f"checkpoint {result.checkpoint_path}"
    )


def cmd_predict(args) -> None:
    config = _load_config(args)
    net, meta = load_checkpoint(args.checkpoint)
    if args.config and meta.get("config_hash") and meta["config_hash"] != config.hash:
        warnings.warn(
            f"checkpoint config hash {meta['config_hash']} differs from current "
            f"config hash {config.hash}"
        )
    if not config.manifest:
        raise SystemExit("predict requires --manifest")
    cases = load_manifest(config.manifest, validate=False)
    out = _stage_dir(config, "predictions")
    device = _resolve_device(args.device)
    net.to(device)
    for case in cases:
        image = load_image(case.image_path)
        probs = predict_volume(net, image, device)
        binary = (probs > 0.5).astype(np.uint8)
        prob_vol = image.with_data(probs)
        pred_vol = LabelVolume(
            data=binary, spacing=image.spacing, origin=image.origin, direction=image.direction
        )
        save_volume(prob_vol, out / f"{case.case_id}_prob.nii.gz")
        save_volume(pred_vol, out / f"{case.case_id}_pred.nii.gz")
        sidecar_dir = Path(case.image_path).parent
        try:
            sidecar = load_sidecar(sidecar_dir, case.case_id)
        except FileNotFoundError:
            sidecar = None
        if sidecar is not None:
            info = CropInfo.from_json(sidecar["crop"])
            full = uncrop(binary, info)
            save_volume(
                LabelVolume(data=full, spacing=image.spacing),
                out / f"{case.case_id}_pred_original.nii.gz",
            )
    print(f"predicted {len(cases)} cases -> {out}")


def cmd_evaluate(args) -> None:
    config = _load_config(args)
    if not config.manifest:
        raise SystemExit("evaluate requires --manifest")
    cases = load_manifest(config.manifest, validate=False)
    pred_dir = Path(args.pred_dir)
    out = _stage_dir(config, "evaluation")
    dataset = DatasetEvaluation()
    for case in cases:
        gt = load_mask(case.mask_path)
        pred = load_mask(pred_dir / f"{case.case_id}_pred.nii.gz")
        prostate = load_mask(case.prostate_mask_path) if case.prostate_mask_path else None
        dataset.cases.append(
            evaluate_case(case.case_id, gt, pred.data, prostate_mask=prostate)
        )
    name = args.model or "model"
    eval_path = out / f"{name}_evaluation.json"
    dataset.save_json(eval_path)
    metrics = dataset.metrics()
    with open(out / f"{name}_metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tp", "fp", "fn", "recall", "precision", "f1",
                         "config_hash", "version"])
        writer.writerow([metrics.tp, metrics.fp, metrics.fn, repr(metrics.recall),
                         repr(metrics.precision), repr(metrics.f1), config.hash, __version__])
    print(
        f"evaluated {len(dataset.cases)} cases: TP {metrics.tp} FP {metrics.fp} "
        f"FN {metrics.fn} F1 {metrics.f1:.3f} -> {eval_path}"
    )


def cmd_report(args) -> None:
    config = _load_config(args)
    if not config.manifest:
        raise SystemExit("report requires --manifest")
    cases = load_manifest(config.manifest, validate=False)
    evaluations = {}
    for item in args.evaluation:
        if "=" not in item:
            raise SystemExit(f"--evaluation expects NAME=path.json, got {item!r}")
        name, path = item.split("=", 1)
        evaluations[name] = load_dataset_evaluation(path)
    out = _stage_dir(config, "report")
    report = build_report(evaluations, cases)
    write_report(report, out, config.hash)
    print(f"report for {len(evaluations)} model(s) -> {out}")


def cmd_ablate(args) -> None:
    config = _load_config(args)
    if not config.manifest:
        raise SystemExit("ablate requires --manifest")
    if config.network.architecture not in (Architecture.MRRN, Architecture.MRRN_DS):
        raise SystemExit("ablation sweeps are defined for the multi-resolution architectures")
    cases = load_manifest(config.manifest, validate=False)
    train_cases = [c for c in cases if c.split != Split.VAL]
    val_cases = [c for c in cases if c.split == Split.VAL]
    out = _stage_dir(config, "ablate")
    device = _resolve_device(args.device)

    supervision_grid = [int(s) for s in args.supervision_grid.split(",")] if args.supervision_grid else []
    mu_grid = [float(m) for m in args.mu_grid.split(",")] if args.mu_grid else []
    stream_grid = (
        [StreamAblation.DROP_FULLRES_STREAM, StreamAblation.KEEP_ONLY_FULLRES_STREAM]
        if args.streams
        else []
    )
    if args.epochs is not None:
        config.train.max_epochs = args.epochs

    runs = []
    for level in supervision_grid:
        spec = NetworkSpec.from_json(
            {**config.network.to_json(), "architecture": "MRRN_DS", "supervision_level": level}
        )
        runs.append((f"supervision_{level}", spec, config.train))
    for mu in mu_grid:
        spec = NetworkSpec.from_json({**config.network.to_json(), "architecture": "MRRN_DS"})
        runs.append((f"mu_{mu:g}", spec, replace(config.train, mu=mu)))
    for ablation in stream_grid:
        spec = apply_ablation(config.network, ablation)
        runs.append((f"stream_{ablation.value}", spec, config.train))
    if not runs:
        raise SystemExit("nothing to sweep: give --supervision-grid, --mu-grid, or --streams")

    rows = []
    for tag, spec, train_cfg in runs:
        result = train_model(
            spec, train_cfg, train_cases, val_cases, out, device, config.hash, tag=tag
        )
        rows.append(
            [tag, spec.supervision_level, repr(train_cfg.mu), spec.ablation.value,
             result.stopped_epoch, repr(result.final_train_loss),
             repr(result.best_val_dice)]
        )
        print(f"ablate {tag}: train loss {result.final_train_loss:.4f}")
    with open(out / "ablation_results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "supervision_level", "mu", "stream_ablation",
                         "epochs", "final_train_loss", "best_val_dice"])
        writer.writerows(rows)
    print(f"ablation table -> {out / 'ablation_results.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dilseg",
        description="Prostate dominant-lesion segmentation pipeline on ADC MRI",
    )
    parser.add_argument("--version", action="version", version=f"dilseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="output root directory")
        if manifest:
            p.add_argument("--manifest", help="dataset manifest JSON")

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    common(p, manifest=False)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="resample, crop, and clean a dataset")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model (or full cross-validation)")
    common(p)
    p.add_argument("--arch", choices=[a.value for a in Architecture])
    p.add_argument("--fold", type=int, help="validate on this fold, train on the rest")
    p.add_argument("--cv", action="store_true", help="run all folds")
    p.add_argument("--device", default="auto")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint over a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--device", default="auto")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="lesion-level scoring of predictions")
    common(p)
    p.add_argument("--pred-dir", required=True, help="directory of *_pred volumes")
    p.add_argument("--model", help="model name used in output filenames")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tables, figures, and pairwise statistics")
    common(p)
    p.add_argument(
        "--evaluation", action="append", required=True,
        help="NAME=evaluation.json (repeatable, one per model)",
    )
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="supervision/mu/stream ablation sweeps")
    common(p)
    p.add_argument("--arch", choices=["MRRN", "MRRN_DS"])
    p.add_argument("--supervision-grid", default="1,2,3,4")
    p.add_argument("--mu-grid", default="0.5,0.75,0.95")
    p.add_argument("--streams", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--epochs", type=int, help="override max epochs for sweep runs")
    p.add_argument("--device", default="auto")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> None:
    cache = os.environ.get("DILSEG_CACHE")
    if cache:
        os.environ.setdefault("TORCH_HOME", cache)
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
