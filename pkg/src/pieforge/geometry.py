"""Oriented-box and point-set primitives: frames, transforms, containment,
rotated IoU, and NMS.

Everything here is pure and operates on immutable inputs; callers may invoke
these functions concurrently without synchronization.

Conventions:
  * LiDAR frame, z up. Yaw rotates about +z, right-handed, normalized to
    (-pi, pi].
  * Boxes are closed sets: points exactly on a face count as inside.
  * Box sizes (l, w, h) are full extents; l runs along the box x-axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Rotated-rectangle intersections with area below this are treated as empty.
AREA_EPSILON = 1e-9


class Point(NamedTuple):
    """Single LiDAR return: meters plus reflectance in [0, 1]."""

    x: float
    y: float
    z: float
    intensity: float = 0.0


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = yaw % TWO_PI
    if r > math.pi:
        r -= TWO_PI
    return r


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D bounding box: center, full extents, and heading.

    Raises ValueError on non-finite fields or non-positive sizes. The yaw
    is normalized on construction; headings that differ by pi describe
    distinct boxes (IoU is heading-agnostic, equality is not).
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box fields must be finite, got {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box3D":
        cx, cy, cz, l, w, h, yaw = (float(v) for v in arr)
        return cls(cx, cy, cz, l, w, h, yaw)

    def bev_corners(self) -> list[tuple[float, float]]:
        """Footprint corners (x, y), counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        return [
            (self.cx + c * hl - s * hw, self.cy + s * hl + c * hw),
            (self.cx - c * hl - s * hw, self.cy - s * hl + c * hw),
            (self.cx - c * hl + s * hw, self.cy - s * hl - c * hw),
            (self.cx + c * hl + s * hw, self.cy + s * hl - c * hw),
        ]

    def bev_area(self) -> float:
        return self.l * self.w

    def volume(self) -> float:
        return self.l * self.w * self.h

    def bev_circumradius(self) -> float:
        return math.hypot(self.l, self.w) / 2.0


class PointCloud:
    """Columnar set of LiDAR returns, shape (N, 4): x, y, z, intensity.

    Order-stable: iteration, serialization, and all operations preserve the
    point order they were given. Coordinates must be finite; intensity is
    clamped into [0, 1] on ingest.
    """

    __slots__ = ("data", "frame_id")

    def __init__(self, data: np.ndarray, frame_id: str = "", *, copy: bool = True):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"point data must have shape (N, 4), got {arr.shape}")
        if not np.isfinite(arr[:, :3]).all():
            raise ValueError("point coordinates must be finite")
        needs_clamp = arr.shape[0] > 0 and (
            not np.isfinite(arr[:, 3]).all() or arr[:, 3].min() < 0.0 or arr[:, 3].max() > 1.0
        )
        if needs_clamp:
            arr = arr.copy()
            arr[:, 3] = np.clip(np.nan_to_num(arr[:, 3], nan=0.0), 0.0, 1.0)
        elif copy and arr is data:
            arr = arr.copy()
        self.data = arr
        self.frame_id = frame_id

    @classmethod
    def empty(cls, frame_id: str = "") -> "PointCloud":
        return cls(np.empty((0, 4), dtype=np.float32), frame_id, copy=False)

    @classmethod
    def from_points(cls, points: Iterable[Point | Sequence[float]], frame_id: str = "") -> "PointCloud":
        rows = []
        for p in points:
            t = tuple(p)
            rows.append(t if len(t) == 4 else t + (0.0,) * (4 - len(t)))
        if not rows:
            return cls.empty(frame_id)
        return cls(np.array(rows, dtype=np.float32), frame_id, copy=False)

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    def __len__(self) -> int:
        return self.data.shape[0]

    def __iter__(self):
        for row in self.data:
            yield Point(float(row[0]), float(row[1]), float(row[2]), float(row[3]))

    def select(self, mask_or_index: np.ndarray) -> "PointCloud":
        return PointCloud(self.data[mask_or_index], self.frame_id, copy=False)

    def with_data(self, data: np.ndarray) -> "PointCloud":
        return PointCloud(data, self.frame_id, copy=False)

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(
            np.concatenate([self.data, other.data], axis=0), self.frame_id, copy=False
        )

    def same_points(self, other: "PointCloud") -> bool:
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, frame_id={self.frame_id!r})"


@dataclass(frozen=True)
class Detection:
    """A detected or annotated box, with classification and IoU-estimation
    confidences. Ground-truth labels carry both scores as 1.0."""

    box: Box3D
    class_id: int
    cls_score: float = 1.0
    iou_score: float = 1.0
    teacher_id: Optional[int] = None
    ambiguous: bool = False

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")
        for name in ("cls_score", "iou_score"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be within [0, 1], got {v}")

    def with_box(self, box: Box3D) -> "Detection":
        return replace(self, box=box)


# ---------------------------------------------------------------------------
# containment


def points_in_box_mask(cloud: PointCloud, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside `box` (closed: faces count as inside)."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    xyz = cloud.xyz.astype(np.float64)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    dz = xyz[:, 2] - box.cz
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    lx = c * dx - s * dy
    ly = s * dx + c * dy
    return (
        (np.abs(lx) <= box.l / 2.0)
        & (np.abs(ly) <= box.w / 2.0)
        & (np.abs(dz) <= box.h / 2.0)
    )


def points_in_box(cloud: PointCloud, box: Box3D) -> PointCloud:
    """Points whose coordinates fall within the oriented box, order preserved."""
    return cloud.select(points_in_box_mask(cloud, box))


def points_in_footprint_mask(cloud: PointCloud, box: Box3D) -> np.ndarray:
    """Like points_in_box_mask but ignoring z (BEV footprint, closed)."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    xyz = cloud.xyz.astype(np.float64)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    lx = c * dx - s * dy
    ly = s * dx + c * dy
    return (np.abs(lx) <= box.l / 2.0) & (np.abs(ly) <= box.w / 2.0)


# ---------------------------------------------------------------------------
# rotated IoU


def _clip_polygon(subject: list[tuple[float, float]], clipper: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: clip `subject` against convex CCW `clipper`."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if not output:
            return []
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        m = len(input_pts)
        for j in range(m):
            px, py = input_pts[j]
            qx, qy = input_pts[(j + 1) % m]
            # side > 0: point left of (inside) the clip edge for CCW clipper
            p_side = ex * (py - ay) - ey * (px - ax)
            q_side = ex * (qy - ay) - ey * (qx - ax)
            if p_side >= 0.0:
                output.append((px, py))
                if q_side < 0.0:
                    t = p_side / (p_side - q_side)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
            elif q_side >= 0.0:
                t = p_side / (p_side - q_side)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def _polygon_area(poly: list[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return abs(area) / 2.0


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # cheap reject: footprints cannot touch if circumcircles are disjoint
    dist = math.hypot(a.cx - b.cx, a.cy - b.cy)
    if dist > a.bev_circumradius() + b.bev_circumradius():
        return 0.0
    # fixed operand order keeps iou(a, b) bit-identical to iou(b, a)
    ka = (a.cx, a.cy, a.l, a.w, a.yaw)
    kb = (b.cx, b.cy, b.l, b.w, b.yaw)
    if kb < ka:
        a, b = b, a
    inter = _polygon_area(_clip_polygon(a.bev_corners(), b.bev_corners()))
    if inter < AREA_EPSILON:
        return 0.0
    return inter


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated footprint rectangles. Symmetric, in [0, 1]."""
    if a == b:
        return 1.0
    inter = _bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.bev_area() + b.bev_area() - inter
    return min(inter / union, 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection area times z-overlap, over the union."""
    if a == b:
        return 1.0
    z_lo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    z_hi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    if z_hi <= z_lo:
        return 0.0
    inter_area = _bev_intersection_area(a, b)
    if inter_area == 0.0:
        return 0.0
    inter = inter_area * (z_hi - z_lo)
    union = a.volume() + b.volume() - inter
    return min(inter / union, 1.0)


def box_iou(a: Box3D, b: Box3D, metric: str = "bev") -> float:
    if metric == "bev":
        return bev_iou(a, b)
    if metric == "3d":
        return iou_3d(a, b)
    raise ValueError(f"unknown IoU metric {metric!r} (expected 'bev' or '3d')")


# ---------------------------------------------------------------------------
# NMS


def nms(dets: Sequence[Detection], iou_threshold: float, metric: str = "bev") -> list[Detection]:
    """Greedy non-maximum suppression by descending cls_score.

    Score ties are broken by lower original index; a detection is suppressed
    when its IoU with an already-kept detection exceeds the threshold
    (strictly). Output is sorted by descending score.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be within [0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].cls_score, i))
    kept: list[Detection] = []
    for i in order:
        cand = dets[i]
        if all(box_iou(cand.box, k.box, metric) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# transforms


def transform_points(
    points: np.ndarray,
    scale: float | Sequence[float] = 1.0,
    rot_z: float = 0.0,
    translate: Sequence[float] = (0.0, 0.0, 0.0),
) -> np.ndarray:
    """Scale, then rotate about +z, then translate, in that order exactly.

    Accepts (N, 3) or (N, 4) arrays; the intensity column, when present, is
    carried through untouched. Returns float64.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError(f"points must have shape (N, 3) or (N, 4), got {pts.shape}")
    if np.ndim(scale) == 0:
        sx = sy = sz = float(scale)  # type: ignore[arg-type]
    else:
        sx, sy, sz = (float(v) for v in scale)
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise ValueError(f"scale factors must be positive, got {(sx, sy, sz)}")
    out = pts.copy()
    out[:, 0] *= sx
    out[:, 1] *= sy
    out[:, 2] *= sz
    if rot_z != 0.0:
        c, s = math.cos(rot_z), math.sin(rot_z)
        x = out[:, 0].copy()
        y = out[:, 1].copy()
        out[:, 0] = c * x - s * y
        out[:, 1] = s * x + c * y
    tx, ty, tz = (float(v) for v in translate)
    out[:, 0] += tx
    out[:, 1] += ty
    out[:, 2] += tz
    return out


def canonicalize_points(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Express world-frame points in the box-local frame (centered, yaw-aligned)."""
    pts = np.asarray(points, dtype=np.float64)
    shifted = pts.copy()
    shifted[:, 0] -= box.cx
    shifted[:, 1] -= box.cy
    shifted[:, 2] -= box.cz
    return transform_points(shifted, 1.0, -box.yaw, (0.0, 0.0, 0.0))


def localize_to_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Inverse of canonicalize_points: box-local points back to world frame."""
    return transform_points(points, 1.0, box.yaw, (box.cx, box.cy, box.cz))
