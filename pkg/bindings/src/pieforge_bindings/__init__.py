"""Array-interchange boundary for external training loops.

Two entry points cover the production path: `py_pieaug` runs the pie
compensation + semi-DB + injection chain on raw arrays, and `py_fuse` merges
per-teacher detection arrays into filtered pseudo-labels. Both delegate to
the pieforge core and are bit-identical to calling it directly with the same
inputs and seed; no logic lives here. Checkpoint converters bridge
framework-native tensor dicts and the "CKP1" container.

Buffers cross the boundary zero-copy when they already match the expected
layout (f32, C-contiguous, in-range); heavy work happens inside numpy
kernels, which release the interpreter lock. Errors surface as typed
exceptions: ShapeError for malformed buffers, ContractError for calls the
core rejects (carrying the core's message verbatim).
"""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from pieforge.augment import pieaug_frame
from pieforge.classes import Category, ClassTable, default_class_table
from pieforge.fusion import NmsConfig, TeacherOutput, ThresholdPolicy, fuse
from pieforge.semidb import SemiDB, build_semidb, inject_from_semidb

from .arrays import (
    BindingError,
    ContractError,
    ShapeError,
    cloud_from_points,
    detections_from_arrays,
    detections_to_arrays,
)
from .convert import arrays_to_ckp1, ckp1_to_arrays, ckp1_to_npz, npz_to_ckp1

__version__ = "0.1.0"

__all__ = [
    "BindingError", "ContractError", "ShapeError",
    "py_pieaug", "py_fuse",
    "arrays_to_ckp1", "ckp1_to_arrays", "ckp1_to_npz", "npz_to_ckp1",
]


def py_pieaug(
    points: np.ndarray,
    boxes: np.ndarray,
    classes: np.ndarray,
    scores: Optional[np.ndarray] = None,
    deg: float = 45.0,
    seed: int = 0,
    quotas: Optional[Mapping[int, int]] = None,
    db_path=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pie-compensate a frame, refresh the semi-DB, and copy-paste samples
    back in; returns (points', boxes', classes') as f32/f32/int32 arrays.

    `scores` may be (N,) classification scores or an (N, 2) column pair of
    classification and IoU-estimation scores. When `db_path` names an
    existing semi-DB it is sampled instead of the freshly built one (entries
    from the same frame mostly collide with their own originals). Quotas
    default to 2 per present class.
    """
    cloud = cloud_from_points(points)
    cls_scores = iou_scores = None
    if scores is not None:
        s = np.asarray(scores)
        if s.ndim == 2 and s.shape[1] == 2:
            cls_scores, iou_scores = s[:, 0], s[:, 1]
        elif s.ndim == 1:
            cls_scores = s
        else:
            raise ShapeError(f"scores: expected shape (N,) or (N, 2), got {s.shape}")
    labels = detections_from_arrays(boxes, classes, cls_scores, iou_scores)
    try:
        deg = float(deg)
        bank, _stats, _pies = pieaug_frame(cloud, labels, deg)
        if db_path is not None:
            db = SemiDB.read(db_path)
        else:
            db = build_semidb(labels, bank)
        if quotas is None:
            quotas = {cid: 2 for cid in sorted({e.label.class_id for e in db.entries})}
        out_cloud, out_labels, _ = inject_from_semidb(cloud, labels, db, quotas, seed)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    out = detections_to_arrays(out_labels)
    return out_cloud.data, out["boxes"], out["classes"]


def py_fuse(
    teacher_outputs: Sequence[Mapping],
    policy: Optional[Mapping | ThresholdPolicy] = None,
    nms_metric: str = "bev",
    nms_threshold: float = 0.1,
    class_table: Optional[Mapping | ClassTable] = None,
) -> dict[str, np.ndarray]:
    """Fuse per-teacher detection arrays into selected pseudo-labels.

    Each teacher record is a mapping with keys `teacher_id`, `category`, and
    the parallel buffers `boxes` (M x 7 f32), `classes` (M,), `cls_scores`
    and `iou_scores` (M, f32). Returns parallel output buffers plus an
    `ambiguous` mask for the low-confidence band.
    """
    if policy is None:
        policy_obj = ThresholdPolicy.fixed()
    elif isinstance(policy, ThresholdPolicy):
        policy_obj = policy
    else:
        try:
            policy_obj = ThresholdPolicy.from_mapping(policy)
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"bad threshold policy: {exc}") from None
    if class_table is None:
        table = default_class_table()
    elif isinstance(class_table, ClassTable):
        table = class_table
    else:
        try:
            table = ClassTable.from_spec(class_table)
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"bad class table: {exc}") from None

    outputs = []
    for i, rec in enumerate(teacher_outputs):
        try:
            teacher_id = int(rec["teacher_id"])
            category = Category(rec["category"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ShapeError(f"teacher record #{i}: {exc}") from None
        dets = detections_from_arrays(
            rec["boxes"], rec["classes"], rec.get("cls_scores"), rec.get("iou_scores")
        )
        dets = [
            type(d)(d.box, d.class_id, d.cls_score, d.iou_score, teacher_id, d.ambiguous)
            for d in dets
        ]
        outputs.append(TeacherOutput(teacher_id, category, dets))
    try:
        fused = fuse(outputs, policy_obj, NmsConfig(nms_metric, nms_threshold), table)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    return detections_to_arrays(fused)
