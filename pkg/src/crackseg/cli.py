"""Command-line entry point: ``crackseg <command> [options]``.

Exit codes:
    0  success
    2  bad command-line usage (argparse)
    3  invalid configuration
    4  data problem (missing/unreadable images or masks)
    5  training diverged (NaN/inf); the last good checkpoint is kept
    6  unreadable or incompatible checkpoint
    7  comparison rejected (key mismatch, too few pairs, zero variance)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError
from .data import DataError, DatasetSpec, list_images, load_image, mask_path_for, read_mask
from .export import export_attention, save_mask_png
from .metrics.core import METRIC_NAMES, aggregate, evaluate_pair
from .metrics.report import SCHEMA_VERSION, summary_json, ttest_json, write_csv, write_json
from .metrics.stats import paired_ttest
from .synthgen import SynthSpec, generate
from .trainer import NonFiniteError, fit, load_trained

logger = logging.getLogger("crackseg")

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NONFINITE = 5
EXIT_CHECKPOINT = 6
EXIT_COMPARE = 7


# ------------------------------------------------------------------- helpers
def _image_inputs(inputs: list[str]) -> list[Path]:
    paths: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            sub = p / "images" if (p / "images").is_dir() else p
            paths.extend(list_images(DatasetSpec(root=str(sub), image_dir=".")))
        else:
            paths.append(p)
    return paths


def _checkpoint_resize(data, override) -> tuple[int, int] | None:
    if override:
        return tuple(override)
    resize = data.config.get("data", {}).get("resize")
    return None if resize is None else tuple(resize)


def _predict_masks(model, paths: list[Path], target) -> tuple[list[tuple[Path, np.ndarray]], list[Path]]:
    done, skipped = [], []
    for p in paths:
        try:
            img = load_image(p, target)
        except DataError as exc:
            logger.warning("skipping %s: %s", p, exc)
            skipped.append(p)
            continue
        done.append((p, model.predict(img[None]).prediction.mask[0]))
    return done, skipped


# ------------------------------------------------------------------ commands
def cmd_train(args) -> int:
    overrides = {"max_epochs": args.max_epochs, "variant": args.variant, "seed": args.seed, "data_root": args.data_root, "out_dir": args.out_dir}
    cfg = cfgmod.build(args.config, overrides)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    try:
        result = fit(cfg.model_config(), cfg.data_spec(), cfg.train_config(), cfg.loss_config(), out, resume=args.resume)
    except NonFiniteError as exc:
        logger.error("training diverged: %s (last good checkpoint: %s)", exc, exc.last_good)
        return EXIT_NONFINITE
    last = result.history[-1] if result.history else {}
    summary = {
        "schema_version": SCHEMA_VERSION,
        "variant": cfg["variant"],
        "seed": cfg["seed"],
        "epochs_run": len(result.history),
        "stop_reason": result.stop_reason,
        "final": last,
        "best_val_total": min((h["val_total"] for h in result.history), default=None),
        "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
        "seconds": result.seconds,
    }
    write_json(out / "summary.json", summary)
    print(json.dumps({"out_dir": str(out), "stop_reason": result.stop_reason, "final_train_total": last.get("train_total")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, data = load_trained(args.checkpoint)
    target = _checkpoint_resize(data, args.resize)
    spec = DatasetSpec(root=args.data_root, mask_dir=args.mask_dir)
    paths = list_images(spec)
    reports, missing = [], []
    for p in paths:
        mpath = mask_path_for(p, spec)
        if mpath is None:
            missing.append(p.name)
            continue
        try:
            img = load_image(p, target)
        except DataError as exc:
            logger.warning("skipping %s: %s", p, exc)
            missing.append(p.name)
            continue
        pred = model.predict(img[None]).prediction.mask[0]
        gt = read_mask(mpath, pred.shape)
        reports.append(evaluate_pair(pred, gt, p.stem))
    if missing:
        logger.warning("excluded %d image(s) without a usable mask: %s", len(missing), ", ".join(missing))
    if not reports:
        logger.error("no image had a ground-truth mask; nothing to evaluate")
        return EXIT_DATA
    report = aggregate(reports, exclude_degenerate=args.exclude_degenerate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", report.images)
    doc = summary_json(report, {"dataset": args.name or Path(args.data_root).name, "checkpoint": str(args.checkpoint), "excluded_missing_mask": missing})
    write_json(out / "metrics.json", doc)
    print(json.dumps({k: v["mean"] for k, v in doc["metrics"].items()}))
    return EXIT_OK


def cmd_infer(args) -> int:
    model, data = load_trained(args.checkpoint)
    target = _checkpoint_resize(data, args.resize)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done, skipped = _predict_masks(model, _image_inputs(args.inputs), target)
    for p, mask in done:
        save_mask_png(mask, out / f"{p.stem}.png")
    print(json.dumps({"written": len(done), "skipped": [str(s) for s in skipped]}))
    return EXIT_OK if done or not skipped else EXIT_DATA


def cmd_export_attention(args) -> int:
    model, data = load_trained(args.checkpoint)
    target = _checkpoint_resize(data, args.resize)
    paths = _image_inputs(args.inputs)
    try:
        records = export_attention(model, paths, args.out_dir, target)
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    if not records:
        logger.error("none of the %d input image(s) could be read", len(paths))
        return EXIT_DATA
    print(json.dumps({"exported": [r.name for r in records]}))
    return EXIT_OK


def _scores_from(paths: list[str], metric_names) -> dict[str, dict[str, float]]:
    """Dataset -> metric -> score from eval summaries or ``{"datasets": ...}`` files."""
    out: dict[str, dict[str, float]] = {}
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if "datasets" in doc:
            for name, scores in doc["datasets"].items():
                out[name] = {m: float(scores[m]) for m in metric_names if m in scores}
        elif "metrics" in doc:
            name = doc.get("dataset") or Path(p).stem
            out[name] = {m: doc["metrics"][m]["mean"] for m in metric_names if m in doc["metrics"]}
        else:
            raise ValueError(f"{p}: expected a 'datasets' mapping or an eval summary")
    return out


def cmd_compare(args) -> int:
    try:
        a = _scores_from(args.a, args.metrics)
        b = _scores_from(args.b, args.metrics)
        if set(a) != set(b):
            raise ValueError(f"dataset keys differ: only in A {sorted(set(a) - set(b))}, only in B {sorted(set(b) - set(a))}")
        names = sorted(a)
        results = {}
        for m in args.metrics:
            xs = [a[n].get(m) for n in names]
            ys = [b[n].get(m) for n in names]
            if any(v is None for v in xs + ys):
                raise ValueError(f"metric {m!r} is missing for some dataset")
            results[m] = paired_ttest(xs, ys)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        logger.error("comparison rejected: %s", exc)
        return EXIT_COMPARE
    doc = ttest_json(results)
    doc["datasets"] = names
    if args.out:
        write_json(args.out, doc)
    for m, r in results.items():
        print(f"{m}: mean_diff={r.mean_diff:.6g} t={r.t_statistic:.4f} df={r.df} p={r.p_value:.4g} {r.stars}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    spec = SynthSpec(count=args.count, size=tuple(args.size), seed=args.seed, min_strokes=args.min_strokes, max_strokes=args.max_strokes)
    try:
        stems = generate(spec, args.out_dir)
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    print(json.dumps({"out_dir": args.out_dir, "count": len(stems)}))
    return EXIT_OK


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crackseg",
        description="Self-supervised crack segmentation: train, evaluate, infer, export attention, compare runs.",
        epilog="Configuration keys (use --print-config for defaults):\n  "
        + "\n  ".join(f"{k.name}: {k.help}" for k in cfgmod.KEYS),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--print-config", action="store_true", help="print every config key with its default and exit")
    parser.add_argument("--config", help="with --print-config: show this file merged over the defaults")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("--config", help="JSON or YAML run configuration")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--variant", choices=["full", "v0", "v1", "v2", "v3"])
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root")
    p.add_argument("--out-dir")
    p.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against ground-truth masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True, help="directory with images/ and masks/")
    p.add_argument("--mask-dir", default="masks")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", help="dataset name recorded in the summary (default: directory name)")
    p.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--exclude-degenerate", action="store_true", help="drop empty-mask images from the aggregates")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write binary 0/255 mask PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-attention", help="write attention overlays and predicted masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("compare", help="paired t-test between two runs across datasets")
    p.add_argument("--a", nargs="+", required=True, help="summaries of run A")
    p.add_argument("--b", nargs="+", required=True, help="summaries of run B")
    p.add_argument("--metrics", nargs="+", default=["miou", "dice"], choices=list(METRIC_NAMES))
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic crack corpus with masks")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, nargs=2, default=[256, 256], metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-strokes", type=int, default=1)
    p.add_argument("--max-strokes", type=int, default=3)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config:
            if args.config:
                print(json.dumps(cfgmod.build(args.config).to_dict(), indent=2))
            else:
                print(cfgmod.describe())
            return EXIT_OK
        if args.command is None:
            parser.print_help()
            return 2
        return args.func(args)
    except cfgmod.ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except CheckpointError as exc:
        logger.error("checkpoint error: %s", exc)
        return EXIT_CHECKPOINT
    except (DataError, FileNotFoundError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
