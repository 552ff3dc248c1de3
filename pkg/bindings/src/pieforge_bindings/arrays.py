"""Array marshalling for the binding boundary.

Inputs are plain contiguous buffers (points N x 4 f32, boxes M x 7 f32,
parallel score/class vectors); validation happens before anything crosses
into the core, and views are passed zero-copy whenever the buffer is already
in the layout the core expects.
"""

from __future__ import annotations

import numpy as np

from pieforge.geometry import Box3D, Detection, PointCloud


class BindingError(Exception):
    """Base class for errors raised at the binding boundary."""


class ShapeError(BindingError):
    """Buffer shape or dtype violates the interchange contract."""


class ContractError(BindingError):
    """The core rejected the call; carries the core's message verbatim."""


def as_f32(name: str, arr, shape_tail: tuple[int, ...]) -> np.ndarray:
    """Validate an (N, *shape_tail) float32 buffer; returns a contiguous f32
    array, zero-copy when the input already satisfies the contract."""
    a = np.asarray(arr)
    want = "(N,)" if not shape_tail else f"(N, {', '.join(map(str, shape_tail))})"
    if a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail:
        raise ShapeError(f"{name}: expected shape {want}, got {a.shape}")
    if a.dtype != np.float32 or not a.flags.c_contiguous:
        a = np.ascontiguousarray(a, dtype=np.float32)
    if not np.isfinite(a).all():
        raise ShapeError(f"{name}: buffer contains non-finite values")
    return a


def as_ids(name: str, arr, n: int) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 1 or a.shape[0] != n:
        raise ShapeError(f"{name}: expected shape ({n},), got {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.issubdtype(a.dtype, np.number) or not np.all(a == np.round(a)):
            raise ShapeError(f"{name}: expected integer class ids")
    return a.astype(np.int32, copy=False)


def cloud_from_points(points, frame_id: str = "binding") -> PointCloud:
    pts = as_f32("points", points, (4,))
    try:
        return PointCloud(pts, frame_id, copy=False)
    except ValueError as exc:
        raise ShapeError(f"points: {exc}") from None


def detections_from_arrays(boxes, classes, cls_scores, iou_scores=None) -> list[Detection]:
    b = as_f32("boxes", boxes, (7,))
    n = b.shape[0]
    cids = as_ids("classes", classes, n)
    cls_s = as_f32("cls_scores", cls_scores, ()) if cls_scores is not None else None
    if cls_s is not None and cls_s.shape[0] != n:
        raise ShapeError(f"cls_scores: expected shape ({n},), got {cls_s.shape}")
    iou_s = as_f32("iou_scores", iou_scores, ()) if iou_scores is not None else None
    if iou_s is not None and iou_s.shape[0] != n:
        raise ShapeError(f"iou_scores: expected shape ({n},), got {iou_s.shape}")
    try:
        return [
            Detection(
                Box3D.from_array(b[i]),
                int(cids[i]),
                cls_score=float(cls_s[i]) if cls_s is not None else 1.0,
                iou_score=float(iou_s[i]) if iou_s is not None else (
                    float(cls_s[i]) if cls_s is not None else 1.0
                ),
            )
            for i in range(n)
        ]
    except ValueError as exc:
        raise ContractError(str(exc)) from None


def detections_to_arrays(dets) -> dict[str, np.ndarray]:
    n = len(dets)
    boxes = np.empty((n, 7), dtype=np.float32)
    classes = np.empty(n, dtype=np.int32)
    cls_scores = np.empty(n, dtype=np.float32)
    iou_scores = np.empty(n, dtype=np.float32)
    teacher_ids = np.full(n, -1, dtype=np.int32)
    ambiguous = np.zeros(n, dtype=bool)
    for i, d in enumerate(dets):
        boxes[i] = d.box.as_array()
        classes[i] = d.class_id
        cls_scores[i] = d.cls_score
        iou_scores[i] = d.iou_score
        if d.teacher_id is not None:
            teacher_ids[i] = d.teacher_id
        ambiguous[i] = d.ambiguous
    return {
        "boxes": boxes,
        "classes": classes,
        "cls_scores": cls_scores,
        "iou_scores": iou_scores,
        "teacher_ids": teacher_ids,
        "ambiguous": ambiguous,
    }
