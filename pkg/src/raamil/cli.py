"""Command-line entry point wiring the pipeline into reproducible runs.

Subcommands: gen-synth, split, train, predict, ensemble, report,
export-attn, validate.  Exit codes: 0 success, 1 validation or runtime
failure, 2 usage error.  Training and generation read a flat JSON config
whose keys mirror the config dataclasses; --set key=value overrides win
over the file, unknown keys are rejected, and the effective config is
snapshotted into the run directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from raamil.bags import BagFormatError
from raamil.folds import FoldError, load_fold_plan, save_fold_plan, stratified_kfold
from raamil.manifest import ManifestError, load_manifest, validate_manifest
from raamil.metrics import (MetricsError, compute_report, ensemble_average,
                            export_attention_map, format_performance_table,
                            format_pr_table)
from raamil.mil import CheckpointError, forward_bag, load_checkpoint
from raamil.synthetic import SynthConfig, generate_synthetic_dataset, make_test_split
from raamil.trainer import TrainConfig, TrainingError, predict, run_cv


class UsageError(Exception):
    """Bad invocation (unknown key, malformed override); exits with 2."""


def _coerce(raw: str, typename: str):
    """Parse one --set value according to the dataclass field annotation."""
    if typename == "bool":
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    try:
        if typename == "int":
            return int(raw)
        if typename == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"expected {typename}, got {raw!r}") from None
    if typename.startswith("tuple"):
        return tuple(part for part in raw.split(",") if part)
    return raw


def _load_config(cls, config_path: str | None, overrides: list[str] | None,
                 seed: int | None):
    """Config file -> --set overrides -> --seed, with unknown keys rejected."""
    values: dict = {}
    if config_path:
        doc = json.loads(Path(config_path).read_text())
        if not isinstance(doc, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        values.update(doc)
    typenames = {f.name: str(f.type) for f in fields(cls)}
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key = key.strip()
        if key not in typenames:
            raise UsageError(f"unknown config key {key!r} for {cls.__name__}")
        values[key] = _coerce(raw, typenames[key])
    unknown = set(values) - set(typenames)
    if unknown:
        raise UsageError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    if seed is not None:
        values["seed"] = seed
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _read_id_list(path) -> list[str]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list) or not all(isinstance(x, str) for x in doc):
        raise UsageError(f"{path} must hold a JSON list of patient ids")
    return doc


# ------------------------------------------------------------------ handlers

def _cmd_gen_synth(args) -> int:
    cfg = _load_config(SynthConfig, args.config, args.set, args.seed)
    manifest = generate_synthetic_dataset(cfg, args.out)
    print(f"wrote {len(manifest.patients)} patients "
          f"({manifest.rows}x{manifest.cols}x{manifest.dim} grids) to {args.out}")
    if args.test_fraction > 0:
        test_ids = make_test_split(manifest, args.test_fraction, cfg.seed)
        path = Path(args.out) / "test_ids.json"
        path.write_text(json.dumps(test_ids, indent=2) + "\n")
        print(f"held out {len(test_ids)} test patients -> {path}")
    return 0


def _cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    labels = manifest.labels
    if args.exclude:
        for pid in _read_id_list(args.exclude):
            labels.pop(pid, None)
    plan = stratified_kfold(labels, args.k, args.seed)
    save_fold_plan(plan, args.out)
    sizes = [len(plan.members(f)) for f in range(plan.k)]
    print(f"assigned {len(plan.assignment)} patients to {plan.k} folds "
          f"(sizes {sizes}) -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    check = validate_manifest(args.manifest)
    if not check.passed:
        print(check.summary(), file=sys.stderr)
        return 1
    manifest = load_manifest(args.manifest)
    cfg = _load_config(TrainConfig, args.config, args.set, args.seed)
    if args.test_ids:
        cfg = replace(cfg, test_ids=tuple(_read_id_list(args.test_ids)))
    plan = load_fold_plan(args.plan) if args.plan else None
    snapshot = {"manifest": str(args.manifest),
                "plan": str(args.plan) if args.plan else None}
    result = run_cv(manifest, cfg, plan=plan, out_dir=args.out,
                    parallel=args.parallel_folds, snapshot_extra=snapshot)
    for row in result.report["folds"]:
        print(f"fold {row['fold']}: val_acc {row['val_acc']:.4f} "
              f"val_f1 {row['val_f1']:.4f} (best epoch {row['best_epoch']})")
    summary = result.report["summary"]
    print(f"validation accuracy {summary['val_acc']}")
    print(f"validation weighted F1 {summary['val_f1']}")
    print(f"artifacts in {args.out}")
    return 0


def _checkpoint_paths(args) -> list[tuple[int, Path]]:
    if args.run_dir:
        paths = sorted(Path(args.run_dir).glob("fold_*.raac"))
        if not paths:
            raise UsageError(f"no fold_*.raac checkpoints under {args.run_dir}")
        return [(int(p.stem.split("_")[1]), p) for p in paths]
    if args.checkpoint:
        return list(enumerate(Path(p) for p in args.checkpoint))
    raise UsageError("need --run-dir or at least one --checkpoint")


def _cmd_predict(args) -> int:
    manifest = load_manifest(args.manifest)
    ids = _read_id_list(args.ids) if args.ids else manifest.patient_ids
    bags = [manifest.load_bag(pid) for pid in ids]
    entries = _checkpoint_paths(args)
    checkpoints = [load_checkpoint(path) for _, path in entries]
    probs = predict(checkpoints, bags)
    doc = {"patient_ids": ids,
           "fold_ids": [fold for fold, _ in entries],
           "probs": probs.tolist()}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote per-fold probabilities for {len(ids)} patients "
          f"x {len(checkpoints)} checkpoints -> {args.out}")
    return 0


def _cmd_ensemble(args) -> int:
    doc = json.loads(Path(args.probs).read_text())
    mean, labels = ensemble_average(doc["probs"], doc.get("fold_ids"))
    out = {"patient_ids": doc["patient_ids"],
           "probs": mean.tolist(),
           "labels": labels.tolist()}
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    print(f"averaged {len(doc['probs'])} folds over {mean.shape[0]} patients -> {args.out}")
    return 0


def _cmd_report(args) -> int:
    doc = json.loads(Path(args.probs).read_text())
    manifest = load_manifest(args.manifest)
    labels = manifest.labels
    missing = [pid for pid in doc["patient_ids"] if pid not in labels]
    if missing:
        raise ManifestError(f"patients absent from manifest: {missing[:5]}")
    truth = [labels[pid] for pid in doc["patient_ids"]]
    report = compute_report(doc["probs"], truth)
    Path(args.out).write_text(report.to_json() + "\n")
    print(format_performance_table(
        [(args.name, report.accuracy, report.weighted_f1, report.weighted_pr_auc)]))
    print()
    print(format_pr_table([args.name], [report.pr_auc_per_class]))
    print(f"\nreport -> {args.out}")
    return 0


def _cmd_export_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    bag = manifest.load_bag(args.id)
    fwd = forward_bag(bag, ckpt.raa, ckpt.mil)
    written = export_attention_map(bag, fwd, args.out, size=args.size)
    print(f"wrote {len(written)} heatmap files for {args.id!r} -> {args.out}")
    return 0


def _cmd_validate(args) -> int:
    report = validate_manifest(args.manifest)
    print(report.summary())
    return 0 if report.passed else 1


# -------------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raamil",
        description="Weakly supervised patient classification on token grids")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_config(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen-synth", help="generate a synthetic token dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="also hold out this stratified fraction as test_ids.json")
    common_config(p)
    p.set_defaults(handler=_cmd_gen_synth)

    p = sub.add_parser("split", help="write a stratified k-fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--exclude", help="JSON id list to keep out of the folds")
    p.add_argument("--out", required=True, help="fold plan JSON path")
    p.set_defaults(handler=_cmd_split)

    p = sub.add_parser("train", help="run cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", help="fold plan JSON (default: derived from config)")
    p.add_argument("--test-ids", help="JSON id list excluded from all folds")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--parallel-folds", action="store_true",
                   help="train folds concurrently")
    common_config(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("predict", help="per-fold probabilities for patients")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", help="directory holding fold_*.raac")
    p.add_argument("--checkpoint", action="append", help="explicit checkpoint (repeatable)")
    p.add_argument("--ids", help="JSON id list (default: whole manifest)")
    p.add_argument("--out", required=True, help="probabilities JSON path")
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("ensemble", help="average per-fold probabilities")
    p.add_argument("--probs", required=True, help="output of `predict`")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_ensemble)

    p = sub.add_parser("report", help="score ensembled probabilities")
    p.add_argument("--probs", required=True, help="output of `ensemble`")
    p.add_argument("--manifest", required=True, help="source of true labels")
    p.add_argument("--name", default="ensemble", help="row label in tables")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("export-attn", help="write attention heatmaps for one patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--id", required=True, help="patient id")
    p.add_argument("--out", required=True, help="heatmap directory")
    p.add_argument("--size", type=int, default=224, help="upsampled side length")
    p.set_defaults(handler=_cmd_export_attn)

    p = sub.add_parser("validate", help="check a manifest and its token files")
    p.add_argument("--manifest", required=True)
    p.set_defaults(handler=_cmd_validate)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (BagFormatError, ManifestError, CheckpointError, FoldError,
            TrainingError, MetricsError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
