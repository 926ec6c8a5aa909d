"""``viewseg`` command line: stats, split, phantom, train, evaluate, predict, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, load_config
from .dataset import (
    DatasetError,
    DatasetIndex,
    DatasetSplit,
    PhantomSpec,
    SplitMode,
    ViewLabel,
    compute_stats,
    generate_phantom,
    make_split,
    preprocess,
    scan_dataset,
    write_dataset,
)
from .metrics import EvalResult, evaluate, read_slice_metrics, comparison_report, write_slice_metrics
from .model import save_checkpoint
from .router import RouterMode, load_router, predict_many, read_manifest, save_manifest
from .training import train_per_view, train_single

log = logging.getLogger("viewseg")

class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="YAML/JSON file of config keys")
    p.add_argument("--data", default=S, help="dataset directory of .mat containers")
    p.add_argument("--annotations", default=S, help="CSV table slice_id,view")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--mode", choices=("single", "per-view"), default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--target-size", type=int, default=S, help="working resolution (multiple of 32)")
    p.add_argument("--threshold", type=float, default=S, help="binarization threshold")
    p.add_argument("--jobs", type=int, default=S, help="parallel loading workers")
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def _split_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--train-count", type=int, default=S, help="training pool size (per view in per-view mode)")
    p.add_argument("--train-frac", type=float, default=S, help="training pool as a fraction of the slices")
    p.add_argument("--val-frac", type=float, default=S, help="fraction of the training pool held out")
    p.add_argument("--patient-disjoint", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="viewseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("stats", help="print slice, view, tumor-type and patient tallies")
    _common(p)

    p = sub.add_parser("split", help="write a deterministic train/val/test split file")
    _common(p)
    _split_flags(p)

    p = sub.add_parser("phantom", help="write a synthetic three-view dataset")
    _common(p)
    p.add_argument("--n", dest="phantom_n", type=int, default=S, help="number of slices")
    p.add_argument("--size", dest="phantom_size", type=int, default=S, help="pixels per side")

    p = sub.add_parser("train", help="train the single network or the three view networks")
    _common(p)
    _split_flags(p)
    p.add_argument("--split", default=S, help="reuse an existing split file")
    p.add_argument("--epochs", dest="max_epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", dest="learning_rate", type=float, default=S)
    p.add_argument("--patience", type=int, default=S)
    p.add_argument("--filters", dest="encoder_filters", default=S, help="encoder widths, e.g. 16,32,64,128")
    p.add_argument("--head-channels", type=int, default=S)
    p.add_argument("--concat-prior", action="store_true", default=S, help="feed the training prior map as channel 2")
    p.add_argument("--device", default=S)

    p = sub.add_parser("evaluate", help="per-slice Dice of a trained router on a split subset")
    _common(p)
    p.add_argument("--manifest", default=S, help="router manifest (default OUT/manifest.json)")
    p.add_argument("--split", default=S, help="split file (default OUT/split.json)")
    p.add_argument("--subset", choices=("train", "val", "test", "all"), default=S)
    p.add_argument("--native-resolution", action="store_true", default=S, help="score against the original-size masks")

    p = sub.add_parser("predict", help="write a binary mask image per slice")
    _common(p)
    p.add_argument("--manifest", default=S, help="router manifest")

    p = sub.add_parser("report", help="single-vs-per-view comparison table")
    _common(p)
    p.add_argument("--single-eval", default=S, help="metrics.csv (or its directory) of the single network")
    p.add_argument("--per-view-eval", default=S, help="metrics.csv (or its directory) of the view networks")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _require_dir(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing required {what} path (--{what})")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def _require_file(path: str | None, what: str, flag: str) -> Path:
    if not path:
        raise UsageError(f"missing required {what} path ({flag})")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _annotations(cfg: RunConfig, per_view: bool) -> Path | None:
    if cfg.annotations is None:
        if per_view:
            raise UsageError("per-view mode needs a view annotation table (--annotations)")
        return None
    return _require_file(cfg.annotations, "annotation", "--annotations")


def _load(cfg: RunConfig, per_view: bool, resize: bool = True) -> DatasetIndex:
    root = _require_dir(cfg.data, "data")
    ann = _annotations(cfg, per_view)
    index = scan_dataset(root, ann, jobs=cfg.jobs)
    if resize:
        index = index.map(lambda s: preprocess(s, cfg.target_size), jobs=cfg.jobs)
    return index


def _out(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / f"config.{command}.json")
    return out


def _metrics_path(path: str | None, flag: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if p.is_dir():
        p = p / "metrics.csv"
    return _require_file(str(p), "metrics", flag)


# ---------------------------------------------------------------------------
# commands


def cmd_stats(cfg: RunConfig) -> int:
    index = _load(cfg, per_view=False, resize=False)
    stats = compute_stats(index)
    width = max(len(k) for k, _ in stats.as_rows())
    for key, value in stats.as_rows():
        print(f"{key:<{width}}  {value:>6}")
    for w in index.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _resolve_split(cfg: RunConfig, index: DatasetIndex) -> DatasetSplit:
    if cfg.split:
        split = DatasetSplit.load(_require_file(cfg.split, "split", "--split"))
        if split.mode is SplitMode.PER_VIEW and cfg.split_mode is SplitMode.SINGLE:
            return split.merged()  # same membership, pooled across views
        if split.mode is not cfg.split_mode:
            raise UsageError(f"split file {cfg.split} is {split.mode.value}, run mode is {cfg.mode}")
        return split
    return make_split(index, cfg.split_mode, cfg.fractions(), cfg.seed)


def cmd_split(cfg: RunConfig) -> int:
    index = _load(cfg, per_view=cfg.mode == "per-view", resize=False)
    split = make_split(index, cfg.split_mode, cfg.fractions(), cfg.seed)
    out = _out(cfg, "split")
    split.save(out / "split.json")
    for key, p in split.partitions.items():
        print(f"{key:<9} train {len(p.train):>5}  val {len(p.val):>5}  test {len(p.test):>5}")
    return 0


def cmd_phantom(cfg: RunConfig) -> int:
    spec = PhantomSpec(n=cfg.phantom_n, size=cfg.phantom_size, seed=cfg.seed)
    try:
        spec.validate()
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    out = _out(cfg, "phantom")
    ann = write_dataset(generate_phantom(spec), out)
    print(f"wrote {spec.n} slices and {ann.name} to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    per_view = cfg.mode == "per-view"
    index = _load(cfg, per_view)
    split = _resolve_split(cfg, index)
    out = _out(cfg, "train")
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    split.save(out / "split.json")

    if per_view:
        trained = {v.value: pair for v, pair in train_per_view(index, split, cfg.train_config(), cfg.model_config()).items()}
    else:
        trained = {"single": train_single(index, split, cfg.train_config(), cfg.model_config())}
    ckpts, summary = {}, {}
    for key, (model, report) in trained.items():
        ckpts[key] = out / "checkpoints" / f"{key}.pt"
        save_checkpoint(model, ckpts[key])
        report.write_log(out / "logs" / f"{key}.csv")
        summary[key] = {
            "epochs": report.epochs,
            "best_epoch": report.best_epoch + 1,
            "best_val_dice": report.val_dice[report.best_epoch],
            "wall_time": report.wall_time,
        }
        print(f"{key:<9} epochs {report.epochs:>3}  best {report.best_epoch + 1:>3}  "
              f"val dice {report.val_dice[report.best_epoch]:.4f}")
    save_manifest(out / "manifest.json", RouterMode(cfg.mode), ckpts)
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out)
    manifest = _require_file(cfg.manifest or str(out_dir / "manifest.json"), "manifest", "--manifest")
    mode, _ = read_manifest(manifest)
    per_view = mode is RouterMode.PER_VIEW
    index = _load(cfg, per_view, resize=False)
    split_path = cfg.split or (str(out_dir / "split.json") if (out_dir / "split.json").is_file() else None)
    if cfg.subset == "all" or split_path is None:
        if split_path is None and cfg.subset != "all":
            log.warning("no split file; evaluating every slice")
        slices = list(index)
    else:
        split = DatasetSplit.load(_require_file(split_path, "split", "--split"))
        slices = index.select(split.ids(cfg.subset))
    if per_view:
        unknown = [s for s in slices if s.view is ViewLabel.UNKNOWN]
        if unknown:
            log.warning("skipping %d slices without a view label", len(unknown))
            slices = [s for s in slices if s.view is not ViewLabel.UNKNOWN]
    native = slices
    slices = [preprocess(s, cfg.target_size) for s in native]
    router = load_router(manifest, map_location=cfg.device)
    result = evaluate(router, slices, cfg.threshold, reference=native if cfg.native_resolution else None)
    out = _out(cfg, "evaluate")
    write_slice_metrics(result, out / "metrics.csv")
    summary = {
        "mode": mode.value,
        "subset": cfg.subset,
        "threshold": cfg.threshold,
        "native_resolution": cfg.native_resolution,
        **result.summary(),
    }
    summary["per_view"] = {v.value: r.summary() for v, r in result.by_view().items()}
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"{result.n} slices  mean dice {result.mean_dice:.4f}  global dice {result.global_dice:.4f}")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    manifest = _require_file(cfg.manifest, "manifest", "--manifest")
    mode, _ = read_manifest(manifest)
    per_view = mode is RouterMode.PER_VIEW
    index = _load(cfg, per_view)
    slices = [s for s in index if not (per_view and s.view is ViewLabel.UNKNOWN)]
    if len(slices) < len(index):
        log.warning("skipping %d slices without a view label", len(index) - len(slices))
    router = load_router(manifest, map_location=cfg.device)
    out = _out(cfg, "predict")
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    for s, (_, mask) in zip(slices, predict_many(router, slices, cfg.threshold)):
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(masks / f"{s.slice_id}.png")
    print(f"wrote {len(slices)} masks to {masks}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    single_path = _metrics_path(cfg.single_eval, "--single-eval")
    per_view_path = _metrics_path(cfg.per_view_eval, "--per-view-eval")
    if single_path is None and per_view_path is None:
        raise UsageError("report needs --single-eval and/or --per-view-eval")
    single: EvalResult | None = read_slice_metrics(single_path) if single_path else None
    per_view = read_slice_metrics(per_view_path).by_view() if per_view_path else None
    report = comparison_report(single, per_view)
    out = _out(cfg, "report")
    report.write(out / "report.csv")
    text = report.format_table()
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


HANDLERS = {
    "stats": cmd_stats,
    "split": cmd_split,
    "phantom": cmd_phantom,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:  # argparse: 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    config_path = args.pop("config", None)
    try:
        cfg = load_config(config_path, args)
        return HANDLERS[command](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"viewseg {command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: corrupt data, training errors
        if verbose:
            log.exception("command failed")
        print(f"viewseg {command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
