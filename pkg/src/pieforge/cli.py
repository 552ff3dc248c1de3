"""Operator-facing command line: thin shells over the library that wire the
pipeline stages into reproducible steps.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error. All outputs
are written atomically, and the effective resolved config is echoed into
every output directory for provenance. Set PIEFORGE_LOG to control log
verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .augment import partition_pies, pieaug_frame
from .classes import Category
from .config import (
    ConfigError,
    PipelineConfig,
    apply_overrides,
    default_config,
    dump_config,
    load_config,
)
from .ema import Checkpoint, CategoryLayout, cema_update
from .fusion import ThresholdPolicy, calibrate_dynamic_thresholds, evaluate, fuse
from .geometry import Detection
from .harness import run_mutual_loop
from .io import (
    FormatError,
    atomic_write_text,
    crop_to_range,
    frame_ids_in,
    read_cloud,
    read_detections,
    read_labels,
    write_cloud,
    write_detections,
    write_labels,
)
from .parallel import ordered_map
from .semidb import SemiDB, build_semidb, inject_from_semidb
from . import report

log = logging.getLogger("pieforge.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we want usage + 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pieforge", description=__doc__, add_help=True)
    parser.add_argument("--version", action="version", version=f"pieforge {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--config", type=Path, help="pipeline config TOML")
        p.add_argument("--seed", type=int, help="override [pipeline].seed")
        p.add_argument("--deg", type=float, help="override [pipeline].deg")
        p.add_argument("--threads", type=int, help="override [pipeline].threads")
        return p

    p = common(sub.add_parser("pieaug", help="compensate + build semi-DB + inject over a dataset"))
    p.add_argument("--data", type=Path, required=True, help="dataset root with points/ and labels/")
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("db-build", help="build a semi-DB from a dataset"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory (semidb.sdb inside)")

    p = common(sub.add_parser("db-inject", help="copy-paste semi-DB samples into frames"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--db", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("fuse", help="fuse per-teacher detection sets into pseudo-labels"))
    p.add_argument("--dets", type=Path, required=True, help="directory with teacher_<id>/ subdirs")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--policy", type=Path, help="threshold policy JSON (from `calibrate`)")

    p = common(sub.add_parser("calibrate", help="fit dynamic thresholds from detection sets"))
    p.add_argument("--dets", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("ema-blend", help="category-wise EMA blend of checkpoints"))
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--student", type=Path, required=True)
    p.add_argument("--category", required=True, choices=[c.value for c in Category])
    p.add_argument("--alpha", type=float, help="override [ema].alpha")
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("sim", help="run the synthetic mutual-learning loop"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, help="override [harness].epochs")

    p = common(sub.add_parser("eval", help="evaluate predictions against ground truth"))
    p.add_argument("--pred", type=Path, required=True, help="directory of mpgen/1 JSON files")
    p.add_argument("--gt", type=Path, required=True, help="directory of labels (.txt) or mpgen JSON")
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("stats", help="per-pie density histogram and class counts"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _load_effective_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else default_config()
    return apply_overrides(config, seed=args.seed, deg=args.deg, threads=args.threads)


def _echo_config(config: PipelineConfig, outdir: Path) -> None:
    atomic_write_text(Path(outdir) / "resolved_config.toml", dump_config(config))


def _read_dataset_frame(config: PipelineConfig, data: Path, frame_id: str):
    cloud = read_cloud(data / "points" / f"{frame_id}.bin")
    labels_path = data / "labels" / f"{frame_id}.txt"
    labels = read_labels(labels_path, config.classes) if labels_path.exists() else []
    return crop_to_range(cloud, labels, config.crop)


def _dataset_frame_ids(data: Path) -> list[str]:
    return frame_ids_in(data / "points", ".bin")


# ---------------------------------------------------------------------------
# commands


def _cmd_db_build(config: PipelineConfig, args) -> int:
    frame_ids = _dataset_frame_ids(args.data)

    def one(frame_id: str):
        cloud, labels = _read_dataset_frame(config, args.data, frame_id)
        return pieaug_frame(cloud, labels, config.deg), labels

    results = ordered_map(one, frame_ids, config.threads)
    bank, all_labels = [], []
    totals: dict[str, int] = {}
    per_frame_pies = {}
    for frame_id, ((frame_bank, stats, pies), labels) in zip(frame_ids, results):
        bank.extend(frame_bank)
        all_labels.extend(labels)
        per_frame_pies[frame_id] = pies
        for k, v in stats.as_dict().items():
            totals[k] = totals.get(k, 0) + v
    db = build_semidb(all_labels, bank, args.out / "semidb.sdb")
    report.write_pie_stats_csv(per_frame_pies, args.out / "pie_stats.csv")
    n_pies = int(round(360.0 / config.deg))
    report.render_pie_histogram(per_frame_pies, n_pies, args.out)
    atomic_write_text(
        args.out / "compensation_stats.json", json.dumps(totals, indent=1, sort_keys=True) + "\n"
    )
    _echo_config(config, args.out)
    print(f"semi-DB: {len(db)} entries from {len(frame_ids)} frames -> {args.out / 'semidb.sdb'}")
    for k in sorted(totals):
        print(f"  {k}: {totals[k]}")
    return 0


def _cmd_db_inject(config: PipelineConfig, args) -> int:
    db = SemiDB.read(args.db)
    frame_ids = _dataset_frame_ids(args.data)
    quotas = config.quota_table()

    def one(item):
        idx, frame_id = item
        cloud, labels = _read_dataset_frame(config, args.data, frame_id)
        return inject_from_semidb(cloud, labels, db, quotas, [config.seed, idx])

    results = ordered_map(one, list(enumerate(frame_ids)), config.threads)
    total = 0
    for frame_id, (cloud, labels, stats) in zip(frame_ids, results):
        write_cloud(cloud, args.out / "points" / f"{frame_id}.bin")
        write_labels(labels, args.out / "labels" / f"{frame_id}.txt", config.classes)
        total += stats.total_injected()
    _echo_config(config, args.out)
    print(f"injected {total} objects across {len(frame_ids)} frames -> {args.out}")
    return 0


def _cmd_pieaug(config: PipelineConfig, args) -> int:
    rc = _cmd_db_build(config, args)
    if rc != 0:
        return rc
    inject_args = argparse.Namespace(data=args.data, db=args.out / "semidb.sdb", out=args.out)
    return _cmd_db_inject(config, inject_args)


def _teacher_category(config: PipelineConfig, teacher_id: int) -> Category:
    for cat, tid in config.teacher_ids.items():
        if tid == teacher_id:
            return cat
    raise ConfigError(f"no category configured for teacher id {teacher_id} (see [teachers])")


def _load_teacher_outputs(config: PipelineConfig, dets_dir: Path):
    """Per-frame TeacherOutput lists from dets/teacher_<id>/<frame>.json."""
    from .fusion import TeacherOutput

    teacher_dirs = sorted(
        p for p in Path(dets_dir).iterdir() if p.is_dir() and p.name.startswith("teacher_")
    )
    if not teacher_dirs:
        raise FormatError(f"{dets_dir}: no teacher_<id>/ subdirectories found")
    frames: dict[str, list] = {}
    for tdir in teacher_dirs:
        try:
            tid = int(tdir.name.removeprefix("teacher_"))
        except ValueError:
            raise FormatError(f"{tdir}: directory name must be teacher_<integer>") from None
        category = _teacher_category(config, tid)
        for path in sorted(tdir.glob("*.json")):
            frame_id, dets = read_detections(path)
            dets = [Detection(d.box, d.class_id, d.cls_score, d.iou_score, tid, d.ambiguous) for d in dets]
            frames.setdefault(frame_id, []).append(TeacherOutput(tid, category, dets))
    return frames


def _cmd_fuse(config: PipelineConfig, args) -> int:
    policy = config.thresholds
    if args.policy:
        policy = ThresholdPolicy.from_mapping(json.loads(Path(args.policy).read_text()))
    frames = _load_teacher_outputs(config, args.dets)
    for frame_id in sorted(frames):
        fused = fuse(frames[frame_id], policy, config.nms, config.classes)
        write_detections(args.out / f"{frame_id}.json", frame_id, fused)
    _echo_config(config, args.out)
    print(f"fused {len(frames)} frames -> {args.out}")
    return 0


def _cmd_calibrate(config: PipelineConfig, args) -> int:
    frames = _load_teacher_outputs(config, args.dets)
    pooled: list[Detection] = []
    for frame_id in sorted(frames):
        for out in frames[frame_id]:
            pooled.extend(out.detections)
    policy = calibrate_dynamic_thresholds(
        pooled, fallback=config.thresholds, min_count=config.threshold_min_count
    )
    atomic_write_text(
        Path(args.out), json.dumps(policy.to_mapping(), indent=1, sort_keys=True) + "\n"
    )
    print(f"calibrated thresholds over {len(pooled)} detections -> {args.out}")
    return 0


def _cmd_ema_blend(config: PipelineConfig, args) -> int:
    teacher = Checkpoint.read(args.teacher)
    student = Checkpoint.read(args.student)
    layout = CategoryLayout.from_class_table(config.classes)
    alpha = config.ema_alpha if args.alpha is None else args.alpha
    blended = cema_update(
        teacher, student, alpha, layout, Category(args.category),
        anchor_patterns=config.anchor_patterns,
    )
    blended.write(args.out)
    print(f"blended {len(blended)} tensors (alpha={alpha}) -> {args.out}")
    return 0


def _cmd_sim(config: PipelineConfig, args) -> int:
    series = run_mutual_loop(config, args.epochs)
    names = config.classes.id_to_name
    report.write_metrics_csv(series, args.out / "metrics.csv", names)
    if series:
        report.render_sim_figures(series, args.out)
    _echo_config(config, args.out)
    print(report.DISCLAIMER)
    print(f"{len(series)} epochs -> {args.out / 'metrics.csv'}")
    if series:
        last = series[-1]
        print(
            f"final epoch: fused precision {last.fused_precision:.3f} at recall "
            f"{last.fused_recall:.3f} (best single teacher {last.best_single_precision:.3f})"
        )
    return 0


def _read_label_dir(config: PipelineConfig, directory: Path) -> dict[str, list[Detection]]:
    directory = Path(directory)
    out: dict[str, list[Detection]] = {}
    txts = sorted(directory.glob("*.txt"))
    if txts:
        for path in txts:
            out[path.stem] = read_labels(path, config.classes)
        return out
    for path in sorted(directory.glob("*.json")):
        frame_id, dets = read_detections(path)
        out[frame_id] = dets
    if not out:
        raise FormatError(f"{directory}: no .txt or .json label files found")
    return out


def _cmd_eval(config: PipelineConfig, args) -> int:
    preds = _read_label_dir(config, args.pred)
    gts = _read_label_dir(config, args.gt)
    missing = sorted(set(gts) - set(preds))
    frame_ids = sorted(gts)
    pred_frames = [preds.get(fid, []) for fid in frame_ids]
    gt_frames = [gts[fid] for fid in frame_ids]
    results = evaluate(pred_frames, gt_frames, config.eval_iou_table(), config.eval_metric)
    names = config.classes.id_to_name
    report.write_eval_csv(results, names, args.out / "eval.csv")
    report.render_eval_figure(results, names, args.out)
    _echo_config(config, args.out)
    if missing:
        log.warning("%d ground-truth frames had no predictions", len(missing))
    for cid in sorted(results):
        e = results[cid]
        print(
            f"{names.get(cid, cid):>14}: AP {e.ap:.4f} precision {e.precision:.4f} "
            f"recall {e.recall:.4f} (tp {e.tp} fp {e.fp} gt {e.n_gt})"
        )
    return 0


def _cmd_stats(config: PipelineConfig, args) -> int:
    frame_ids = _dataset_frame_ids(args.data)

    def one(frame_id: str):
        cloud, labels = _read_dataset_frame(config, args.data, frame_id)
        return partition_pies(labels, cloud, config.deg), labels

    results = ordered_map(one, frame_ids, config.threads)
    per_frame_pies = {}
    counts: dict[str, int] = {}
    names = config.classes.id_to_name
    for frame_id, (pies, labels) in zip(frame_ids, results):
        per_frame_pies[frame_id] = pies
        for det in labels:
            name = names.get(det.class_id, str(det.class_id))
            counts[name] = counts.get(name, 0) + 1
    n_pies = int(round(360.0 / config.deg))
    report.write_pie_stats_csv(per_frame_pies, args.out / "pie_stats.csv")
    report.write_class_counts_csv(counts, args.out / "class_counts.csv")
    report.render_pie_histogram(per_frame_pies, n_pies, args.out)
    _echo_config(config, args.out)
    print(f"{len(frame_ids)} frames, {sum(counts.values())} labels")
    sums = [0.0] * n_pies
    hits = [0] * n_pies
    for pies in per_frame_pies.values():
        for pie in pies:
            sums[pie.pie_id] += pie.norm_density
            hits[pie.pie_id] += 1
    print("pie  mean-density  frames-present")
    for k in range(n_pies):
        mean = sums[k] / hits[k] if hits[k] else 0.0
        print(f"{k:>3}  {mean:>12.2f}  {hits[k]:>14}")
    print("class counts:")
    for name in sorted(counts):
        print(f"  {name}: {counts[name]}")
    return 0


_COMMANDS = {
    "pieaug": _cmd_pieaug,
    "db-build": _cmd_db_build,
    "db-inject": _cmd_db_inject,
    "fuse": _cmd_fuse,
    "calibrate": _cmd_calibrate,
    "ema-blend": _cmd_ema_blend,
    "sim": _cmd_sim,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("PIEFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage(), file=sys.stderr, end="")
        print(f"pieforge: error: {exc}", file=sys.stderr)
        return 1
    if not args.command:
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    try:
        config = _load_effective_config(args)
        return _COMMANDS[args.command](config, args)
    except (ConfigError, FormatError, ValueError, KeyError) as exc:
        log.debug("validation failure", exc_info=True)
        print(f"pieforge: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pieforge: I/O error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:  # console_scripts hook
    raise SystemExit(main())
