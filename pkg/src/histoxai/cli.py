"""Command-line pipeline: prepare -> train -> evaluate -> explain -> report.

Run directory layout::

    <run>/config.yaml            canonical config echo
    <run>/manifest.tsv           split manifest
    <run>/train/best.pt          best-val checkpoint
    <run>/train/state.pt         resumable training state
    <run>/train/trace.tsv        one line per epoch
    <run>/train/summary.json     config echo, digests, wall times
    <run>/eval/metrics.json|csv  metric suite
    <run>/eval/confusion.png
    <run>/explain/<stem>__<method>__<class>.png
    <run>/explain/<stem>__grid.png
    <run>/explain/maps/<stem>__<method>__<class>.map

Exit codes: 0 success, 1 internal failure, 2 bad input.
Option precedence: command-line flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import attribution, dataset, evaluation, models, training, visualization
from .config import (ATTRIBUTION_METHODS, ExperimentConfig, apply_overrides, config_digest, echo_config,
                     load_config, resolve_output_dir)
from .errors import HistoxaiError, InputError
from .preprocess import build_pipeline, load_image

log = logging.getLogger("histoxai")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


def _write_new(path: Path, text: str) -> None:
    if path.exists():
        raise InputError(f"refusing to overwrite existing artifact {path}; use a fresh run directory")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _load_cfg(args, run_dir: Optional[Path] = None) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif run_dir is not None and (run_dir / "config.yaml").is_file():
        cfg = load_config(run_dir / "config.yaml")
    else:
        raise InputError("no config: pass --config or a --run-dir that contains config.yaml")
    overrides = {
        "seed": getattr(args, "seed", None),
        "model.backbone": getattr(args, "backbone", None),
        "training.epochs": getattr(args, "epochs", None),
        "training.batch_size": getattr(args, "batch_size", None),
        "dataset.root": getattr(args, "root", None),
        "evaluation.averaging": getattr(args, "averaging", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return apply_overrides(cfg, overrides) if overrides else cfg


def _require_run_dir(args) -> Path:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise InputError(f"run directory not found: {run_dir}")
    return run_dir


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.dataset.root:
        raise InputError("dataset.root is not set (config or --root)")
    manifest = dataset.scan_dataset(cfg.dataset.root, cfg.dataset.num_classes, cfg.dataset.scan_workers)
    if cfg.dataset.classes:
        manifest = dataset.subset_classes(manifest, cfg.dataset.classes)
    manifest = dataset.split_manifest(manifest, cfg.dataset.split_fractions, cfg.seed_for("dataset"))

    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        run_dir = resolve_output_dir(cfg, args.output_dir) / f"{cfg.model.backbone}-{stamp}"
    if (run_dir / "manifest.tsv").exists():
        raise InputError(f"{run_dir} already holds a prepared run")
    _write_new(run_dir / "config.yaml", echo_config(cfg))
    _write_new(run_dir / "manifest.tsv", dataset.manifest_to_text(manifest))

    counts = manifest.split_counts()
    width = max(len(c) for c in manifest.classes)
    print(f"{'class'.ljust(width)}  {'total':>6}  {'train':>6}  {'val':>6}  {'test':>6}")
    for name in manifest.classes:
        print(f"{name.ljust(width)}  {manifest.class_counts[name]:>6}  {counts['train'][name]:>6}  "
              f"{counts['val'][name]:>6}  {counts['test'][name]:>6}")
    if manifest.skipped:
        print(f"skipped {len(manifest.skipped)} undecodable file(s)")
    print(f"{len(manifest.records)} samples / {len(manifest.classes)} classes")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_dir = _require_run_dir(args)
    cfg = _load_cfg(args, run_dir)
    manifest = dataset.import_manifest(run_dir / "manifest.tsv")
    out = run_dir / "train"
    state_path, trace_path, best_path = out / "state.pt", out / "trace.tsv", out / "best.pt"
    hp = cfg.training
    policy = cfg.preprocess.augmentation

    if args.resume:
        if not state_path.is_file() or not trace_path.is_file():
            raise InputError(f"nothing to resume in {out}")
        trace = training.TrainingTrace.load(trace_path)
        if len(trace.epochs) >= hp.epochs and best_path.is_file():
            print(f"training already complete ({len(trace.epochs)}/{hp.epochs} epochs); nothing to do")
            return EXIT_OK
        model, trace = training.resume(state_path, trace, manifest, hp, policy,
                                       trace_path=trace_path, stop_after=args.stop_after)
    else:
        if state_path.exists() or best_path.exists():
            raise InputError(f"{out} already has training output; use --resume or a fresh run directory")
        model = models.build_model(
            cfg.model.backbone, len(manifest.classes), cfg.model.pretrained,
            seed=cfg.model.init_seed, class_order=manifest.classes, input_size=cfg.preprocess.input_size,
            weights_path=cfg.model.weights_path, freeze_backbone=cfg.model.freeze_backbone,
        )
        model, trace = training.train(model, manifest, hp, policy, state_path=state_path,
                                      trace_path=trace_path, stop_after=args.stop_after)

    trace.save(trace_path)
    if len(trace.epochs) < hp.epochs:
        print(f"stopped after epoch {len(trace.epochs)}/{hp.epochs}; continue with --resume")
        return EXIT_OK
    digest = models.save_checkpoint(model, best_path)
    summary = {
        **training.trace_summary(trace, hp),
        "checkpoint": best_path.name,
        "checkpoint_digest": digest,
        "manifest_digest": manifest.digest(),
        "config_digest": config_digest(cfg),
        "config": echo_config(cfg),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    best = trace.epochs[trace.best_epoch - 1]
    print(f"best epoch {best.epoch}: val_loss={best.val_loss:.4f} val_accuracy={best.val_accuracy:.4f}")
    print(f"checkpoint: {best_path}")
    return EXIT_OK


def _checkpoint_path(args, run_dir: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else run_dir / "train" / "best.pt"


def cmd_evaluate(args) -> int:
    run_dir = _require_run_dir(args)
    cfg = _load_cfg(args, run_dir)
    manifest = dataset.import_manifest(run_dir / "manifest.tsv")
    model = models.load_checkpoint(_checkpoint_path(args, run_dir), class_order=manifest.classes)
    data = training.SplitData(manifest, "test", build_pipeline("test", model.input_size, cfg.preprocess.augmentation),
                              cache=False)
    if len(data) == 0:
        raise InputError("the test split is empty")
    bs = cfg.evaluation.batch_size
    proba = np.concatenate([
        models.predict_proba(model, [data.pipeline.prepare(load_image(manifest.abspath(r)))
                                     for r in data.records[start:start + bs]], bs)
        for start in range(0, len(data), bs)
    ])
    report = evaluation.metric_suite(data.labels, proba, cfg.evaluation.averaging, manifest.classes)
    report.model = model.backbone
    report.model_digest = model.checkpoint_digest
    report.manifest_digest = manifest.digest()
    out = run_dir / "eval"
    if (out / "metrics.json").exists():
        raise InputError(f"{out} already has metrics; use a fresh run directory")
    evaluation.render_report(report, out, cfg.evaluation.confusion_image_size)
    print(evaluation.format_table([report]))
    return EXIT_OK


def _parse_target(text: str):
    if text == "predicted":
        return text
    try:
        return int(text)
    except ValueError:
        return text


def cmd_explain(args) -> int:
    run_dir = _require_run_dir(args)
    cfg = _load_cfg(args, run_dir)
    model = models.load_checkpoint(_checkpoint_path(args, run_dir))

    methods = cfg.attribution.methods
    if args.methods:
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    unknown = [m for m in methods if m not in ATTRIBUTION_METHODS]
    if unknown:
        raise InputError(f"unknown method(s) {unknown}; valid names: {', '.join(ATTRIBUTION_METHODS)}")

    if args.image:
        path = Path(args.image)
    else:
        manifest = dataset.import_manifest(run_dir / "manifest.tsv")
        split, _, index = (args.sample or "test:0").partition(":")
        records = manifest.split(split)
        try:
            record = records[int(index or 0)]
        except (ValueError, IndexError) as exc:
            raise InputError(f"no sample {args.sample!r} ({len(records)} records in split {split!r})") from exc
        path = manifest.abspath(record)
    image = build_pipeline("test", model.input_size, cfg.preprocess.augmentation).prepare(load_image(path))

    proba = models.predict_proba(model, [image])[0]
    target = _parse_target(args.target_class) if args.target_class else cfg.attribution.target_class
    c = attribution.resolve_target(model, torch.from_numpy(proba)[None], target)
    class_name = model.class_order[c]
    stem = path.stem
    out = run_dir / "explain"
    spec = cfg.visualization

    maps = []
    for method in methods:
        amap = attribution.explain(model, image, method, c, cfg.attribution)
        name = visualization.overlay_filename(stem, method, class_name)
        target_png = out / name
        if target_png.exists():
            raise InputError(f"refusing to overwrite existing artifact {target_png}")
        visualization.save_png(visualization.render_overlay(image, amap, spec, method=method, class_name=class_name,
                                                            probability=float(proba[c])), target_png)
        attribution.save_map(amap, out / "maps" / (name[:-4] + ".map"))
        maps.append((method, amap))
        print(f"{method:<17} -> {target_png}" + ("  (degenerate map)" if amap.degenerate else ""))
    grid_path = out / visualization.grid_filename(stem)
    if grid_path.exists():
        raise InputError(f"refusing to overwrite existing artifact {grid_path}")
    grid = visualization.comparison_grid(image, maps, spec, class_name=class_name, probability=float(proba[c]))
    visualization.save_png(grid, grid_path)
    print(f"grid ({len(maps) + 1} tiles) -> {grid_path}")
    return EXIT_OK


def _load_row(run: Path) -> Optional[evaluation.EvaluationReport]:
    for candidate in (run / "eval" / "metrics.json", run / "metrics.json"):
        if candidate.is_file():
            data = json.loads(candidate.read_text(encoding="utf-8"))
            row = {k: float(data[k]) for k in evaluation.METRIC_KEYS}
            return evaluation.EvaluationReport(**row, averaging=data.get("averaging", ""), per_class={},
                                               confusion=None, model=data.get("model", run.name))
    return None


def cmd_report(args) -> int:
    reports = []
    for run in args.runs:
        report = _load_row(Path(run))
        if report is None:
            log.warning("skipping %s: no metrics.json", run)
            continue
        reports.append(report)
    if not reports:
        raise InputError("none of the given run directories has metrics.json")
    reports.sort(key=lambda r: (-r.accuracy, r.log_loss))
    print(evaluation.format_table(reports))
    if args.out:
        Path(args.out).write_text(evaluation.metrics_csv_text(reports), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histoxai", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_required=True):
        p.add_argument("--config", help="experiment YAML (default: <run-dir>/config.yaml)")
        p.add_argument("--run-dir", required=run_required)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("prepare", help="scan, split and write the manifest")
    common(p, run_required=False)
    p.add_argument("--root", help="dataset root (overrides dataset.root)")
    p.add_argument("--backbone")
    p.add_argument("--output-dir", help="parent of the timestamped run directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the configured backbone")
    common(p)
    p.add_argument("--backbone")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", action="store_true", help="continue from train/state.pt")
    p.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metric suite on the test split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--averaging", choices=("weighted", "macro", "micro"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="attribution overlays and comparison grid")
    common(p)
    p.add_argument("--checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="image file to explain")
    src.add_argument("--sample", help="manifest sample as <split>:<index>, default test:0")
    p.add_argument("--methods", help=f"comma-separated subset of: {', '.join(ATTRIBUTION_METHODS)}")
    p.add_argument("--target-class", help="'predicted', a class index, or a class name")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="merge metrics of several runs, best first")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except HistoxaiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # last-resort contract: internal failure
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
