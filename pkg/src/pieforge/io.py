"""Parsers and writers for on-disk formats: point-cloud binaries, KITTI-style
label text, detection-set JSON ("mpgen/1"), and range cropping.

All readers reject malformed input with positioned errors; nothing is
silently truncated. Writers are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .classes import ClassTable
from .geometry import Box3D, Detection, PointCloud, normalize_yaw

log = logging.getLogger(__name__)

DETECTION_SCHEMA = "mpgen/1"


class FormatError(ValueError):
    """Malformed external input, with file/position context."""


@dataclass(frozen=True)
class FrameBundle:
    """One frame as read from disk: cloud plus optional labels."""

    frame_id: str
    cloud: PointCloud
    labels: Optional[list[Detection]] = None


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# point clouds (consecutive little-endian f32 x, y, z, intensity)


def read_cloud(path: str | Path) -> PointCloud:
    """Read an x/y/z/intensity f32 binary. Rows with non-finite coordinates
    are dropped (counted in a warning); a valid file round-trips byte-exactly
    through write_cloud."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) % 16 != 0:
        raise FormatError(
            f"{path}: size {len(blob)} is not a multiple of 16 bytes "
            f"(trailing fragment at byte offset {len(blob) - len(blob) % 16})"
        )
    arr = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(arr[:, :3]).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.warning("%s: dropped %d records with non-finite coordinates", path, dropped)
        arr = arr[finite]
    else:
        arr = arr.copy()
    return PointCloud(arr, frame_id=path.stem, copy=False)


def write_cloud(cloud: PointCloud, path: str | Path) -> None:
    data = np.ascontiguousarray(cloud.data, dtype="<f4")
    atomic_write_bytes(Path(path), data.tobytes())


# ---------------------------------------------------------------------------
# KITTI-style label text
#
# Per line: type truncated occluded alpha x1 y1 x2 y2 h w l x y z ry [score].
# With a camera->LiDAR extrinsic the full camera convention applies (location
# is the bottom face center, ry about the camera y axis); without one the
# line is taken to be LiDAR-frame already (center position, yaw about +z),
# which is how synthetic and LiO-style exports arrive.


def read_labels(
    path: str | Path,
    class_table: ClassTable,
    extrinsic: Optional[np.ndarray] = None,
) -> list[Detection]:
    path = Path(path)
    dets: list[Detection] = []
    skipped = 0
    text = path.read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (15, 16):
            raise FormatError(
                f"{path}:{lineno}: expected 15 or 16 fields, got {len(parts)}"
            )
        name = parts[0]
        if name not in class_table.name_to_id:
            skipped += 1
            continue
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric field ({exc})") from None
        h, w, l = vals[7], vals[8], vals[9]
        x, y, z = vals[10], vals[11], vals[12]
        ry = vals[13]
        score = vals[14] if len(vals) > 14 else 1.0
        if extrinsic is None:
            box = Box3D(x, y, z, l, w, h, ry)
        else:
            loc = extrinsic @ np.array([x, y, z, 1.0])
            box = Box3D(
                float(loc[0]), float(loc[1]), float(loc[2]) + h / 2.0,
                l, w, h, normalize_yaw(-ry - math.pi / 2.0),
            )
        dets.append(
            Detection(
                box,
                class_table.name_to_id[name],
                cls_score=min(max(score, 0.0), 1.0),
                iou_score=min(max(score, 0.0), 1.0),
            )
        )
    if skipped:
        log.warning("%s: skipped %d lines with unknown class names", path, skipped)
    return dets


def write_labels(
    dets: Sequence[Detection],
    path: str | Path,
    class_table: ClassTable,
    extrinsic: Optional[np.ndarray] = None,
) -> None:
    id_to_name = class_table.id_to_name
    lines = []
    for det in dets:
        b = det.box
        if extrinsic is None:
            x, y, z, ry = b.cx, b.cy, b.cz, b.yaw
        else:
            inv = np.linalg.inv(extrinsic)
            loc = inv @ np.array([b.cx, b.cy, b.cz - b.h / 2.0, 1.0])
            x, y, z = (float(v) for v in loc[:3])
            ry = normalize_yaw(-b.yaw - math.pi / 2.0)
        lines.append(
            f"{id_to_name[det.class_id]} 0.00 0 0.00 0.00 0.00 0.00 0.00 "
            f"{b.h:.8f} {b.w:.8f} {b.l:.8f} {x:.8f} {y:.8f} {z:.8f} {ry:.8f} "
            f"{det.cls_score:.8f}"
        )
    atomic_write_text(Path(path), "\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# detection-set JSON ("mpgen/1")


def _det_to_record(det: Detection) -> dict:
    b = det.box
    rec = {
        "class_id": det.class_id,
        "box": [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw],
        "cls_score": det.cls_score,
        "iou_score": det.iou_score,
        "teacher_id": det.teacher_id,
    }
    if det.ambiguous:
        rec["ambiguous"] = True
    return rec


def write_detections(path: str | Path, frame_id: str, dets: Sequence[Detection]) -> None:
    doc = {
        "schema": DETECTION_SCHEMA,
        "frame_id": frame_id,
        "detections": [_det_to_record(d) for d in dets],
    }
    atomic_write_text(Path(path), json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_detections(path: str | Path) -> tuple[str, list[Detection]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("schema") != DETECTION_SCHEMA:
        raise FormatError(
            f"{path}: expected schema {DETECTION_SCHEMA!r}, got {doc.get('schema')!r}"
        )
    dets = []
    for i, rec in enumerate(doc.get("detections", [])):
        try:
            box = Box3D.from_array(rec["box"])
            dets.append(
                Detection(
                    box,
                    int(rec["class_id"]),
                    cls_score=float(rec["cls_score"]),
                    iou_score=float(rec["iou_score"]),
                    teacher_id=None if rec.get("teacher_id") is None else int(rec["teacher_id"]),
                    ambiguous=bool(rec.get("ambiguous", False)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: detection #{i}: {exc}") from None
    return str(doc.get("frame_id", path.stem)), dets


# ---------------------------------------------------------------------------
# range crop


def crop_to_range(
    cloud: PointCloud,
    labels: Sequence[Detection],
    crop: Sequence[float],
) -> tuple[PointCloud, list[Detection]]:
    """Keep points inside the axis-aligned range (inclusive) and labels whose
    centers fall inside. Range order: x_min, y_min, x_max, y_max, z_min, z_max."""
    x0, y0, x1, y1, z0, z1 = (float(v) for v in crop)
    if x1 < x0 or y1 < y0 or z1 < z0:
        raise ValueError(f"crop range is not well-ordered: {list(crop)}")
    xyz = cloud.xyz
    mask = (
        (xyz[:, 0] >= x0) & (xyz[:, 0] <= x1)
        & (xyz[:, 1] >= y0) & (xyz[:, 1] <= y1)
        & (xyz[:, 2] >= z0) & (xyz[:, 2] <= z1)
    )
    kept_labels = [
        d for d in labels
        if x0 <= d.box.cx <= x1 and y0 <= d.box.cy <= y1 and z0 <= d.box.cz <= z1
    ]
    return cloud.select(mask), kept_labels


# ---------------------------------------------------------------------------
# dataset directory layout: {points/, labels/, dets/teacher_<id>/}


def frame_ids_in(directory: str | Path, suffix: str) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"expected a directory at {d}")
    return sorted(p.stem for p in d.iterdir() if p.suffix == suffix)


def read_frame(root: str | Path, frame_id: str, class_table: ClassTable) -> FrameBundle:
    root = Path(root)
    cloud = read_cloud(root / "points" / f"{frame_id}.bin")
    label_path = root / "labels" / f"{frame_id}.txt"
    labels = read_labels(label_path, class_table) if label_path.exists() else None
    return FrameBundle(frame_id, cloud, labels)
