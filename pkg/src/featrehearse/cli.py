"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 missing input, 4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import memory as mem_mod
from .checkpoint import read_checkpoint
from .config import ConfigError, load_config
from .data import ConfigurationError, DataFormatError, DATA_ENV
from .evaluation import evaluate_task
from .memory import CorruptArtifactError
from .trainer import IncrementalTrainer, build_stream, run

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_CORRUPT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args, **extra):
    try:
        return load_config(args.config, args.set or (), **extra)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        raise CliError(f"config error{key}: {exc}", EXIT_CONFIG) from exc
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {exc.filename}", EXIT_MISSING) from exc


def _stream(cfg):
    try:
        return build_stream(cfg)
    except FileNotFoundError as exc:
        where = exc.filename or f"${DATA_ENV}"
        raise CliError(f"dataset not found: {where}", EXIT_MISSING) from exc


def _latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted(run_dir.glob("task_*.ckpt"))
    return ckpts[-1] if ckpts else None


# -- commands ---------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _config(args, out=args.out, data_root=args.data_root)
    stream = _stream(cfg)
    metrics = run(cfg, stream, out_dir=cfg.out, resume_from=args.resume, stop_after=args.stop_after, echo=print)
    print(f"average incremental accuracy {metrics.average_incremental_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    if ckpt is None or not ckpt.exists():
        raise CliError(f"no checkpoint in {run_dir}", EXIT_MISSING)
    meta, _ = read_checkpoint(ckpt)
    overrides = [f"{k}={v}" for k, v in meta["config"].items() if v is not None]
    args.config = None
    args.set = overrides + list(args.set or ())
    cfg = _config(args, data_root=args.data_root)
    stream = _stream(cfg)
    trainer = IncrementalTrainer(cfg, stream)
    trainer.load_checkpoint(ckpt)
    t = trainer.state.task
    split = stream.tasks[t - 1]
    acc = evaluate_task(trainer.state.classifier, trainer.state.model.extractor,
                        trainer._prep(split.test_images), split.test_labels, cfg.top_k)
    print(f"task {t}: classes_seen={len(trainer.state.seen)} acc={acc:.4f} ({ckpt.name})")
    return EXIT_OK


def _load_mem(path: Path):
    if path.is_dir():
        path = path / "memory.frmem"
    if not path.exists():
        raise CliError(f"memory snapshot not found: {path}", EXIT_MISSING)
    return mem_mod.load_memory(path)


def cmd_inspect_memory(args) -> int:
    mem = _load_mem(Path(args.path))
    print(f"dim={mem.dim} budget={mem.budget} classes={len(mem.classes)} descriptors={len(mem)}")
    print(f"{'class':>6} {'count':>6} {'adapted':>8} {'mean_norm':>10}")
    for c in mem.classes:
        slot = mem.slots[c]
        adapted = int(slot.adapt_count.max()) if len(slot) else 0
        norm = float(np.linalg.norm(slot.descriptors, axis=1).mean()) if len(slot) else 0.0
        print(f"{c:>6} {len(slot):>6} {adapted:>8} {norm:>10.4f}")
    return EXIT_OK


def _image_counts(run_dir: Path) -> tuple[dict[int, int], tuple[int, ...]]:
    ckpt = _latest_checkpoint(run_dir)
    if ckpt is None:
        return {}, ()
    meta, arrays = read_checkpoint(ckpt)
    counts, shape = {}, ()
    for c in meta.get("exemplar_classes", []):
        imgs = arrays[f"img/{c}/images"]
        counts[int(c)] = imgs.shape[0]
        shape = tuple(imgs.shape[1:])
    return counts, shape


def cmd_footprint(args) -> int:
    if args.classes is not None:
        feats = {c: args.per_class for c in range(args.classes)}
        imgs = {c: args.images_per_class for c in range(args.classes)} if args.images_per_class else {}
        shape = tuple(int(s) for s in args.image_shape.split("x")) if args.image_shape else ()
        report = mem_mod.footprint_from_counts(feats, imgs, args.dim, shape)
        out = Path(args.out) if args.out else None
    else:
        if not args.run_dir:
            raise CliError("footprint needs a run dir or --classes", EXIT_CONFIG)
        run_dir = Path(args.run_dir)
        mem = _load_mem(run_dir)
        img_counts, shape = _image_counts(run_dir)
        report = mem_mod.footprint_from_counts(mem.counts(), img_counts, mem.dim, shape)
        out = Path(args.out) if args.out else run_dir
    print(f"{'class':>6} {'feature_bytes':>14} {'image_bytes':>12}")
    for c, row in sorted(report.per_class.items()):
        print(f"{c:>6} {row['feature_bytes']:>14} {row['image_bytes']:>12}")
    print(f"features {report.feature_bytes} B ({mem_mod.to_mib(report.feature_bytes):.1f} MB)")
    print(f"images   {report.image_bytes} B ({mem_mod.to_mib(report.image_bytes):.1f} MB)")
    print(f"total    {report.total_bytes} B ({mem_mod.to_mib(report.total_bytes):.1f} MB)")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "footprint.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"missing {path}", EXIT_MISSING)
    try:
        obj = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CliError(f"malformed {path}: {exc}", EXIT_CORRUPT) from exc
    if not isinstance(obj, dict):
        raise CliError(f"malformed {path}: expected an object", EXIT_CORRUPT)
    return obj


def cmd_plot_data(args) -> int:
    summary, curves = [], []
    for d in args.run_dirs:
        run_dir = Path(d)
        metrics = _read_json(run_dir / "metrics.json")
        fp = _read_json(run_dir / "footprint.json")
        try:
            curve = [(int(r["task"]), int(r["classes_seen"]), float(r["accuracy"])) for r in metrics["curve"]]
            avg = float(metrics["avg_inc_acc"])
            total = int(fp["total_bytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"malformed metrics in {run_dir}: {exc}", EXIT_CORRUPT) from exc
        cfg_path = run_dir / "config.json"
        digest = _read_json(cfg_path).get("digest", "") if cfg_path.exists() else ""
        summary.append((str(run_dir), mem_mod.to_mib(total), avg, digest))
        curves.extend((str(run_dir), *row) for row in curve)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "memory_vs_accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "memory_mb", "avg_inc_acc", "config_digest"])
        w.writerows(summary)
    with open(out / "accuracy_vs_task.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "task_index", "classes_seen", "accuracy"])
        w.writerows(curves)
    for row in summary:
        print(f"{row[0]}: {row[1]:.4f} MB, avg inc acc {row[2]:.4f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featrehearse", description="Class-incremental learning with feature rehearsal.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--data-root", help=f"dataset directory (default ${DATA_ENV})")

    r = sub.add_parser("run", help="train over every task")
    common(r)
    r.add_argument("--out", help="output directory")
    r.add_argument("--resume", help="checkpoint to resume from")
    r.add_argument("--stop-after", type=int, help="stop after this task index")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="re-evaluate a checkpoint on its cumulative test set")
    common(e)
    e.add_argument("run_dir")
    e.add_argument("--checkpoint", help="specific checkpoint (default: latest in run_dir)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-memory", help="summarize a memory snapshot")
    m.add_argument("path", help="run dir or .frmem file")
    m.set_defaults(func=cmd_inspect_memory)

    f = sub.add_parser("footprint", help="memory footprint of a run, or of hypothetical counts")
    f.add_argument("run_dir", nargs="?")
    f.add_argument("--classes", type=int, help="hypothetical class count instead of a run dir")
    f.add_argument("--per-class", type=int, default=250)
    f.add_argument("--dim", type=int, default=512)
    f.add_argument("--images-per-class", type=int, default=0)
    f.add_argument("--image-shape", help="HxWxC for hypothetical images, e.g. 32x32x3")
    f.add_argument("--out", help="directory for footprint.json (default: the run dir)")
    f.set_defaults(func=cmd_footprint)

    pd = sub.add_parser("plot-data", help="CSV tables for accuracy-vs-memory and accuracy-vs-task plots")
    pd.add_argument("run_dirs", nargs="+")
    pd.add_argument("--out", default=".")
    pd.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CorruptArtifactError, DataFormatError) as exc:
        print(f"error: corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
