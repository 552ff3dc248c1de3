"""Persisted bank of (pseudo-label, compensated foreground points) pairs.

Entries store their points in the label's box-local frame (centered,
yaw-aligned) so they are pose-free and relocatable. On injection, a sampled
entry is placed back at its stored pose, subject to a collision-free
background constraint.

File format "SDB1", little-endian:
    magic "SDB1"
    u32 entry count
    per entry:
        u16 class_id
        7 x f32 box (cx, cy, cz, l, w, h, yaw)
        f32 cls_score, f32 iou_score
        u32 point count, then count x 4 x f32 box-local points
        u16 frame-id byte length, UTF-8 frame id
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .augment import CompensatedObject
from .geometry import (
    Box3D,
    Detection,
    PointCloud,
    bev_iou,
    canonicalize_points,
    localize_to_box,
    points_in_footprint_mask,
)

log = logging.getLogger(__name__)

MAGIC = b"SDB1"

# slack for f32 round-trips when checking canonical points against extents
EXTENT_TOL = 1e-5


class SemiDBFormatError(ValueError):
    """Raised for malformed SDB1 payloads, with byte-offset context."""


@dataclass(frozen=True)
class SemiDBEntry:
    """One relocatable object: label plus box-local canonical points."""

    label: Detection
    points: PointCloud
    source_frame: str

    def __post_init__(self):
        box = self.label.box
        if len(self.points) == 0:
            return
        xyz = self.points.xyz.astype(np.float64)
        half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0]) + EXTENT_TOL
        if (np.abs(xyz) > half).any():
            raise ValueError(
                f"canonical points exceed box extents for class {self.label.class_id} "
                f"from frame {self.source_frame!r}"
            )

    def world_points(self) -> PointCloud:
        """Entry points expressed at the stored pose."""
        data = self.points.data.astype(np.float64, copy=True)
        data[:, :3] = localize_to_box(data[:, :3], self.label.box)
        return PointCloud(data.astype(np.float32), self.source_frame, copy=False)


class SemiDB:
    """In-memory semi-DB; ordered entries, retrievable per class."""

    def __init__(self, entries: Sequence[SemiDBEntry] = ()):
        self.entries: list[SemiDBEntry] = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def by_class(self) -> dict[int, list[SemiDBEntry]]:
        out: dict[int, list[SemiDBEntry]] = {}
        for e in self.entries:
            out.setdefault(e.label.class_id, []).append(e)
        return out

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<I", len(self.entries))]
        for e in self.entries:
            b = e.label.box
            chunks.append(
                struct.pack(
                    "<H7fff",
                    e.label.class_id,
                    b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw,
                    e.label.cls_score,
                    e.label.iou_score,
                )
            )
            pts = np.ascontiguousarray(e.points.data, dtype="<f4")
            chunks.append(struct.pack("<I", len(e.points)))
            chunks.append(pts.tobytes())
            fid = e.source_frame.encode("utf-8")
            chunks.append(struct.pack("<H", len(fid)))
            chunks.append(fid)
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SemiDB":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise SemiDBFormatError(f"bad magic {bytes(view[:4])!r} at offset 0")
        off = 4

        def take(n: int) -> memoryview:
            nonlocal off
            if off + n > len(view):
                raise SemiDBFormatError(
                    f"truncated payload: need {n} bytes at offset {off}, have {len(view) - off}"
                )
            chunk = view[off:off + n]
            off += n
            return chunk

        (count,) = struct.unpack("<I", take(4))
        entries = []
        for _ in range(count):
            cid, cx, cy, cz, l, w, h, yaw, cls_s, iou_s = struct.unpack("<H7fff", take(38))
            (n_pts,) = struct.unpack("<I", take(4))
            pts = np.frombuffer(take(n_pts * 16), dtype="<f4").reshape(n_pts, 4)
            (fid_len,) = struct.unpack("<H", take(2))
            fid = bytes(take(fid_len)).decode("utf-8")
            label = Detection(
                Box3D(cx, cy, cz, l, w, h, yaw), cid,
                cls_score=float(cls_s), iou_score=float(iou_s),
            )
            entries.append(SemiDBEntry(label, PointCloud(pts, fid), fid))
        if off != len(view):
            raise SemiDBFormatError(f"{len(view) - off} trailing bytes at offset {off}")
        return cls(entries)

    def write(self, path: str | Path) -> None:
        from .io import atomic_write_bytes

        try:
            atomic_write_bytes(Path(path), self.to_bytes())
        except OSError as exc:
            raise OSError(f"failed writing semi-DB to {path}: {exc}") from exc

    @classmethod
    def read(cls, path: str | Path) -> "SemiDB":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise OSError(f"failed reading semi-DB from {path}: {exc}") from exc
        return cls.from_bytes(blob)


def build_semidb(
    labels: Sequence[Detection],
    bank: Sequence[CompensatedObject],
    path: Optional[str | Path] = None,
) -> SemiDB:
    """Canonicalize the compensated bank into a semi-DB, ordered by class
    (stable within class), and persist it when a path is given.

    Rebuilding from identical inputs yields a byte-identical file.
    """
    known_ids = {id(l) for l in labels}
    known_vals = set(labels)
    order = sorted(range(len(bank)), key=lambda i: (bank[i].label.class_id, i))
    entries = []
    for i in order:
        obj = bank[i]
        if labels and id(obj.label) not in known_ids and obj.label not in known_vals:
            log.warning("bank label not among provided pseudo-labels (class %d)", obj.label.class_id)
        data = obj.points.data.astype(np.float64, copy=True)
        data[:, :3] = canonicalize_points(data[:, :3], obj.label.box)
        entries.append(
            SemiDBEntry(obj.label, PointCloud(data.astype(np.float32), obj.source_frame), obj.source_frame)
        )
    db = SemiDB(entries)
    if path is not None:
        db.write(path)
    return db


@dataclass
class InjectionStats:
    requested: dict[int, int] = field(default_factory=dict)
    injected: dict[int, int] = field(default_factory=dict)
    rejected_collisions: dict[int, int] = field(default_factory=dict)
    exhausted_classes: list[int] = field(default_factory=list)

    def total_injected(self) -> int:
        return sum(self.injected.values())


def inject_from_semidb(
    cloud: PointCloud,
    labels: Sequence[Detection],
    db: SemiDB,
    per_class_quota: Mapping[int, int],
    rng_seed: "int | Sequence[int]",
) -> tuple[PointCloud, list[Detection], InjectionStats]:
    """Copy-paste sampled entries into background areas of a frame.

    Entries are sampled per class (without replacement, seeded) and placed at
    their stored pose. A candidate is rejected when its footprint overlaps any
    existing or already-injected box (bev_iou > 0). Cloud points inside an
    accepted footprint are removed before the entry's points are appended, so
    the injected box contains exactly the entry's points afterwards.
    """
    for cid, quota in per_class_quota.items():
        if quota < 0:
            raise ValueError(f"quota for class {cid} must be >= 0, got {quota}")
    rng = np.random.default_rng(rng_seed)
    stats = InjectionStats()
    placed_boxes = [d.box for d in labels]
    out_labels = list(labels)
    keep_mask = np.ones(len(cloud), dtype=bool)
    injected_clouds: list[PointCloud] = []
    entries_by_class = db.by_class()
    for cid in sorted(per_class_quota):
        quota = per_class_quota[cid]
        stats.requested[cid] = quota
        stats.injected[cid] = 0
        stats.rejected_collisions[cid] = 0
        if quota == 0:
            continue
        pool = entries_by_class.get(cid, [])
        order = rng.permutation(len(pool)) if pool else []
        for idx in order:
            if stats.injected[cid] >= quota:
                break
            entry = pool[int(idx)]
            box = entry.label.box
            if any(bev_iou(box, other) > 0.0 for other in placed_boxes):
                stats.rejected_collisions[cid] += 1
                continue
            keep_mask &= ~points_in_footprint_mask(cloud, box)
            injected_clouds.append(entry.world_points())
            out_labels.append(entry.label)
            placed_boxes.append(box)
            stats.injected[cid] += 1
        if stats.injected[cid] < quota:
            stats.exhausted_classes.append(cid)
    parts = [cloud.data[keep_mask]] + [c.data for c in injected_clouds]
    out_cloud = cloud.with_data(np.concatenate(parts, axis=0))
    return out_cloud, out_labels, stats
