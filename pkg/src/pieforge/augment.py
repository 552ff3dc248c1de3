"""Weak augmentations and the pie-sector point-compensation pipeline.

The scan is split into equal-angle azimuthal sectors ("pies") around the
sensor. Sectors are ranked by mean foreground points per object; objects in
the densest sector donate points to same-class objects in the sparsest one,
and the enriched foreground sets feed the semi-DB used for copy-paste
injection (see semidb module).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    Box3D,
    Detection,
    PointCloud,
    points_in_box,
    transform_points,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# weak augmentation


@dataclass(frozen=True)
class WeakAugParams:
    """Draw distribution for weak augmentation; ranges are config-exposed."""

    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.5
    rot_range: float = math.pi / 4.0  # rot_z ~ U(-rot_range, rot_range)
    scale_range: tuple[float, float] = (0.95, 1.05)


@dataclass(frozen=True)
class WeakAugRecord:
    """Exact transform applied by weak_augment, in application order:
    flip about x, flip about y, rotate about z, uniform scale. Invertible."""

    flip_x: bool = False
    flip_y: bool = False
    rot_z: float = 0.0
    scale: float = 1.0


def _flip_box_x(box: Box3D) -> Box3D:
    return Box3D(box.cx, -box.cy, box.cz, box.l, box.w, box.h, -box.yaw)


def _flip_box_y(box: Box3D) -> Box3D:
    return Box3D(-box.cx, box.cy, box.cz, box.l, box.w, box.h, math.pi - box.yaw)


def apply_weak_record(
    cloud: PointCloud, labels: Sequence[Detection], record: WeakAugRecord
) -> tuple[PointCloud, list[Detection]]:
    """Apply a recorded weak augmentation to points and boxes jointly."""
    data = cloud.data.astype(np.float64, copy=True)
    boxes = [d.box for d in labels]
    if record.flip_x:
        data[:, 1] = -data[:, 1]
        boxes = [_flip_box_x(b) for b in boxes]
    if record.flip_y:
        data[:, 0] = -data[:, 0]
        boxes = [_flip_box_y(b) for b in boxes]
    if record.rot_z != 0.0 or record.scale != 1.0:
        data[:, :3] = transform_points(data[:, :3], 1.0, record.rot_z, (0, 0, 0))
        data[:, :3] *= record.scale
        c, s = math.cos(record.rot_z), math.sin(record.rot_z)
        boxes = [
            Box3D(
                (c * b.cx - s * b.cy) * record.scale,
                (s * b.cx + c * b.cy) * record.scale,
                b.cz * record.scale,
                b.l * record.scale,
                b.w * record.scale,
                b.h * record.scale,
                b.yaw + record.rot_z,
            )
            for b in boxes
        ]
    out_labels = [d.with_box(b) for d, b in zip(labels, boxes)]
    return cloud.with_data(data.astype(np.float32)), out_labels


def invert_weak_record(
    cloud: PointCloud, labels: Sequence[Detection], record: WeakAugRecord
) -> tuple[PointCloud, list[Detection]]:
    """Undo apply_weak_record (inverse steps in reverse order)."""
    c1, l1 = apply_weak_record(
        cloud, labels, WeakAugRecord(rot_z=-record.rot_z, scale=1.0 / record.scale)
    )
    if record.flip_y:
        c1, l1 = apply_weak_record(c1, l1, WeakAugRecord(flip_y=True))
    if record.flip_x:
        c1, l1 = apply_weak_record(c1, l1, WeakAugRecord(flip_x=True))
    return c1, l1


def weak_augment(
    cloud: PointCloud,
    labels: Sequence[Detection],
    rng_seed: "int | Sequence[int]",
    params: WeakAugParams = WeakAugParams(),
) -> tuple[PointCloud, list[Detection], WeakAugRecord]:
    """Random flip / rotation / scaling, applied identically to points and
    boxes. Deterministic for a given seed."""
    rng = np.random.default_rng(rng_seed)
    record = WeakAugRecord(
        flip_x=bool(rng.random() < params.flip_x_prob),
        flip_y=bool(rng.random() < params.flip_y_prob),
        rot_z=float(rng.uniform(-params.rot_range, params.rot_range)),
        scale=float(rng.uniform(*params.scale_range)),
    )
    out_cloud, out_labels = apply_weak_record(cloud, labels, record)
    return out_cloud, out_labels, record


# ---------------------------------------------------------------------------
# pie partition


def pie_id(box: Box3D, deg: float) -> int:
    """Azimuthal sector index of a box center.

    The horizontal angle atan2(cx, cy) is converted to degrees, shifted by
    +180 into [0, 360], and divided by the sector width; the 360-degree edge
    folds into the last sector so k always lies in [0, 360/deg).
    """
    n_pies = _check_deg(deg)
    if box.cx == 0.0 and box.cy == 0.0:
        log.warning("box at sensor origin has no azimuth; assigning pie 0")
        return 0
    angle = math.degrees(math.atan2(box.cx, box.cy)) + 180.0
    k = int(angle // deg)
    return min(max(k, 0), n_pies - 1)


def _check_deg(deg: float) -> int:
    if deg <= 0:
        raise ValueError(f"deg must be positive, got {deg}")
    n = 360.0 / deg
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"deg must divide 360 evenly, got {deg}")
    return int(round(n))


@dataclass
class Pie:
    """One azimuthal sector: its objects with their foreground points, and
    the sector's normalized density (mean points per object)."""

    pie_id: int
    objects: list[tuple[Detection, PointCloud]] = field(default_factory=list)

    @property
    def norm_density(self) -> float:
        if not self.objects:
            return 0.0
        return float(np.mean([len(pts) for _, pts in self.objects]))


def partition_pies(
    labels: Sequence[Detection], cloud: PointCloud, deg: float
) -> list[Pie]:
    """Assign each label with foreground points to its sector; sort sectors
    by descending mean points-per-object (ties to the lower pie id)."""
    _check_deg(deg)
    by_id: dict[int, Pie] = {}
    for det in labels:
        fg = points_in_box(cloud, det.box)
        if len(fg) == 0:
            continue
        k = pie_id(det.box, deg)
        by_id.setdefault(k, Pie(k)).objects.append((det, fg))
    return sorted(by_id.values(), key=lambda p: (-p.norm_density, p.pie_id))


# ---------------------------------------------------------------------------
# point compensation


@dataclass(frozen=True)
class CompensatedObject:
    """Bank entry: a label with its (possibly enriched) world-frame points."""

    label: Detection
    points: PointCloud
    source_frame: str


@dataclass
class CompensationStats:
    pairs_processed: int = 0
    objects_donated: int = 0
    objects_passthrough: int = 0
    objects_unpaired: int = 0
    class_mismatches: int = 0
    zero_point_donors: int = 0
    points_added: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "pairs_processed": self.pairs_processed,
            "objects_donated": self.objects_donated,
            "objects_passthrough": self.objects_passthrough,
            "objects_unpaired": self.objects_unpaired,
            "class_mismatches": self.class_mismatches,
            "zero_point_donors": self.zero_point_donors,
            "points_added": self.points_added,
        }


def donate_points(donor: tuple[Detection, PointCloud], target: tuple[Detection, PointCloud]) -> PointCloud:
    """Refit the donor's foreground points into the target box and append
    them after the target's own points.

    Donor points are expressed in the donor box-local frame, scaled per axis
    by the target/donor extent ratios, rotated to the target yaw, and
    translated to the target center.
    """
    d_det, d_pts = donor
    t_det, t_pts = target
    d_box, t_box = d_det.box, t_det.box
    local = np.asarray(d_pts.data, dtype=np.float64).copy()
    local[:, 0] -= d_box.cx
    local[:, 1] -= d_box.cy
    local[:, 2] -= d_box.cz
    local[:, :3] = transform_points(local[:, :3], 1.0, -d_box.yaw, (0, 0, 0))
    local[:, :3] = transform_points(
        local[:, :3],
        (t_box.l / d_box.l, t_box.w / d_box.w, t_box.h / d_box.h),
        t_box.yaw,
        (t_box.cx, t_box.cy, t_box.cz),
    )
    moved = t_pts.with_data(np.concatenate([t_pts.data, local.astype(np.float32)], axis=0))
    return moved


def compensate(pies: Sequence[Pie]) -> tuple[list[CompensatedObject], CompensationStats]:
    """Pair the densest sector with the sparsest and donate points into its
    objects, repeating until fewer than two sectors remain.

    Inside a sector pair, donors are ranked by descending point count and
    targets by ascending count, paired rank-to-rank up to the smaller object
    count. A pair donates only when the classes match and the donor has
    points; otherwise the target is banked unaugmented (logged). Both paired
    objects always enter the bank; objects beyond the pairing count do not.
    Donation never alters a box and never reduces a point count. A leftover
    odd sector contributes its objects unmodified.
    """
    queue = list(pies)
    bank: list[CompensatedObject] = []
    stats = CompensationStats()

    def banked(det: Detection, pts: PointCloud) -> CompensatedObject:
        return CompensatedObject(det, pts, pts.frame_id)

    while len(queue) >= 2:
        dense = queue.pop(0)
        sparse = queue.pop(-1)
        stats.pairs_processed += 1
        donors = sorted(
            range(len(dense.objects)), key=lambda i: (-len(dense.objects[i][1]), i)
        )
        targets = sorted(
            range(len(sparse.objects)), key=lambda i: (len(sparse.objects[i][1]), i)
        )
        m = min(len(donors), len(targets))
        for di, ti in zip(donors[:m], targets[:m]):
            donor = dense.objects[di]
            target = sparse.objects[ti]
            if donor[0].class_id != target[0].class_id:
                log.debug(
                    "class mismatch (donor %d, target %d): target kept unaugmented",
                    donor[0].class_id, target[0].class_id,
                )
                stats.class_mismatches += 1
                bank.append(banked(*target))
            elif len(donor[1]) == 0:
                log.warning(
                    "donor object with 0 points skipped (class %d); target kept unaugmented",
                    donor[0].class_id,
                )
                stats.zero_point_donors += 1
                bank.append(banked(*target))
            else:
                enriched = donate_points(donor, target)
                stats.objects_donated += 1
                stats.points_added += len(enriched) - len(target[1])
                bank.append(banked(target[0], enriched))
            bank.append(banked(*donor))
        stats.objects_unpaired += (len(dense.objects) - m) + (len(sparse.objects) - m)
    if queue:
        leftover = queue[0]
        for det, pts in leftover.objects:
            bank.append(banked(det, pts))
            stats.objects_passthrough += 1
    return bank, stats


def pieaug_frame(
    cloud: PointCloud, labels: Sequence[Detection], deg: float
) -> tuple[list[CompensatedObject], CompensationStats, list[Pie]]:
    """Partition + compensate for one frame; returns the foreground bank."""
    pies = partition_pies(labels, cloud, deg)
    bank, stats = compensate(pies)
    return bank, stats, pies
