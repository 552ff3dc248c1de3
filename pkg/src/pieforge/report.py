"""Report rendering: delimited metrics files plus matplotlib figures saved
next to them. Figures are written with fixed metadata so identical runs
produce identical bytes."""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .augment import Pie
from .fusion import ClassEval
from .harness import EpochMetrics
from .io import atomic_write_bytes, atomic_write_text

_PNG_KWARGS = dict(format="png", dpi=110, metadata={"Software": "pieforge"})

DISCLAIMER = (
    "Synthetic desk-scale run: validates pipeline logic with simulated "
    "detectors, not benchmark accuracy."
)


def _save_fig(fig, path: Path) -> None:
    buf = _io.BytesIO()
    fig.savefig(buf, **_PNG_KWARGS)
    plt.close(fig)
    atomic_write_bytes(Path(path), buf.getvalue())


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# simulation metrics


def write_metrics_csv(
    series: Sequence[EpochMetrics], path: Path, class_names: Mapping[int, str]
) -> None:
    header = [
        "epoch", "n_frames", "fused_precision", "fused_recall",
        "n_confident", "n_ambiguous", "best_single_precision",
        "generalist_precision", "mean_ap", "teacher_center_jitter",
        "skill_gap", "semidb_entries", "objects_donated", "points_added",
    ]
    class_ids = sorted(class_names)
    for cid in class_ids:
        header += [f"ap_{class_names[cid]}", f"precision_{class_names[cid]}", f"recall_{class_names[cid]}"]
    rows = []
    for m in series:
        comp = m.compensation or {}
        row = [
            m.epoch, m.n_frames, f"{m.fused_precision:.6f}", f"{m.fused_recall:.6f}",
            m.n_confident, m.n_ambiguous, f"{m.best_single_precision:.6f}",
            f"{m.generalist_precision:.6f}", f"{m.mean_ap:.6f}",
            f"{m.teacher_center_jitter:.6f}", f"{m.skill_gap:.6f}",
            "" if m.semidb_entries is None else m.semidb_entries,
            "" if m.compensation is None else comp.get("objects_donated", 0),
            "" if m.compensation is None else comp.get("points_added", 0),
        ]
        for cid in class_ids:
            e = m.per_class.get(cid)
            row += (
                [f"{e.ap:.6f}", f"{e.precision:.6f}", f"{e.recall:.6f}"]
                if e else ["", "", ""]
            )
        rows.append(row)
    atomic_write_text(path, f"# {DISCLAIMER}\n" + _csv_text(header, rows))


def render_sim_figures(series: Sequence[EpochMetrics], outdir: Path) -> list[Path]:
    outdir = Path(outdir)
    written = []
    epochs = [m.epoch for m in series]

    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(epochs, [m.fused_precision for m in series], "o-", label="fused pseudo-labels")
    ax.plot(epochs, [m.best_single_precision for m in series], "s--", label="best single teacher")
    ax.plot(epochs, [m.generalist_precision for m in series], "^:", label="generalist teacher")
    ax.set_xlabel("epoch")
    ax.set_ylabel("precision at fused recall")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title("Pseudo-label precision (synthetic teachers)", fontsize=10)
    fig.tight_layout()
    path = outdir / "precision_series.png"
    _save_fig(fig, path)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(epochs, [m.mean_ap for m in series], "o-", label="mAP (fused)")
    ax2 = ax.twinx()
    ax2.plot(epochs, [m.skill_gap for m in series], "r--", label="EMA skill gap")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mAP")
    ax.set_ylim(0.0, 1.05)
    ax2.set_ylabel("teacher-student skill gap (m)")
    ax.legend(loc="lower left", fontsize=8)
    ax2.legend(loc="upper right", fontsize=8)
    ax.set_title("Detection quality and EMA convergence", fontsize=10)
    fig.tight_layout()
    path = outdir / "ap_series.png"
    _save_fig(fig, path)
    written.append(path)
    return written


# ---------------------------------------------------------------------------
# dataset statistics


def write_pie_stats_csv(
    per_frame_pies: Mapping[str, Sequence[Pie]], path: Path
) -> None:
    rows = []
    for frame_id in sorted(per_frame_pies):
        for pie in per_frame_pies[frame_id]:
            rows.append(
                [frame_id, pie.pie_id, len(pie.objects), f"{pie.norm_density:.6f}"]
            )
    atomic_write_text(
        path, _csv_text(["frame_id", "pie_id", "n_objects", "norm_density"], rows)
    )


def write_class_counts_csv(
    counts: Mapping[str, int], path: Path
) -> None:
    rows = [[name, counts[name]] for name in sorted(counts)]
    atomic_write_text(path, _csv_text(["class", "count"], rows))


def render_pie_histogram(
    per_frame_pies: Mapping[str, Sequence[Pie]], n_pies: int, outdir: Path
) -> Path:
    sums = [0.0] * n_pies
    hits = [0] * n_pies
    for pies in per_frame_pies.values():
        for pie in pies:
            sums[pie.pie_id] += pie.norm_density
            hits[pie.pie_id] += 1
    means = [s / h if h else 0.0 for s, h in zip(sums, hits)]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.bar(range(n_pies), means, color="#4878a8")
    ax.set_xlabel("pie id")
    ax.set_ylabel("mean points per object")
    ax.set_title("Sector density (mean over frames)", fontsize=10)
    fig.tight_layout()
    path = Path(outdir) / "pie_density_hist.png"
    _save_fig(fig, path)
    return path


# ---------------------------------------------------------------------------
# evaluation


def write_eval_csv(
    results: Mapping[int, ClassEval], class_names: Mapping[int, str], path: Path
) -> None:
    rows = []
    for cid in sorted(results):
        e = results[cid]
        rows.append(
            [
                class_names.get(cid, str(cid)), f"{e.ap:.6f}", f"{e.precision:.6f}",
                f"{e.recall:.6f}", e.tp, e.fp, e.n_gt,
            ]
        )
    atomic_write_text(
        path,
        _csv_text(["class", "ap", "precision", "recall", "tp", "fp", "n_gt"], rows),
    )


def render_eval_figure(
    results: Mapping[int, ClassEval], class_names: Mapping[int, str], outdir: Path
) -> Path:
    names = [class_names.get(cid, str(cid)) for cid in sorted(results)]
    aps = [results[cid].ap for cid in sorted(results)]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.bar(names, aps, color="#55a868")
    ax.set_ylabel("AP (40 recall positions)")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Average precision per class", fontsize=10)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    path = Path(outdir) / "ap_per_class.png"
    _save_fig(fig, path)
    return path
