"""Multi-teacher pseudo-label fusion: per-teacher NMS, cross-teacher merge,
and dual dynamic-threshold filtering, plus the matched evaluation metrics.

Each teacher is specialized for one category (vehicle / pedestrian /
cyclist) and only emits that category's classes, so the merge step is a
plain concatenation: cross-teacher suppression could only destroy
information. Filtering then keeps detections confident on both the
classification and the IoU-estimation channel; the band between the low and
high thresholds is retained but flagged ambiguous so downstream consumers
can reproduce hierarchical supervision schemes (default consumers drop it).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .classes import Category, ClassTable
from .geometry import Detection, box_iou, nms


@dataclass(frozen=True)
class NmsConfig:
    metric: str = "bev"
    threshold: float = 0.1

    def __post_init__(self):
        if self.metric not in ("bev", "3d"):
            raise ValueError(f"nms metric must be 'bev' or '3d', got {self.metric!r}")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"nms threshold must be within [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class TeacherOutput:
    """Detections one category-specialized teacher produced for a frame."""

    teacher_id: int
    category: Category
    detections: tuple[Detection, ...]

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "detections", tuple(self.detections))

    def validate_classes(self, table: ClassTable) -> None:
        allowed = set(table.ids_for(self.category))
        for det in self.detections:
            if det.class_id not in allowed:
                raise ValueError(
                    f"teacher {self.teacher_id} ({self.category}) produced class_id "
                    f"{det.class_id} outside its category"
                )


@dataclass(frozen=True)
class ClassThresholds:
    cls_high: float
    cls_low: float
    iou_high: float
    iou_low: float

    def __post_init__(self):
        for low, high, name in (
            (self.cls_low, self.cls_high, "cls"),
            (self.iou_low, self.iou_high, "iou"),
        ):
            if not (0.0 <= low <= high <= 1.0):
                raise ValueError(f"need 0 <= {name}_low <= {name}_high <= 1, got {low}..{high}")


@dataclass(frozen=True)
class ThresholdPolicy:
    """Per-class high/low cutoffs for both score channels."""

    mode: str
    per_class: Mapping[int, ClassThresholds]
    default: ClassThresholds = ClassThresholds(0.7, 0.3, 0.5, 0.25)

    def __post_init__(self):
        if self.mode not in ("fixed", "dynamic"):
            raise ValueError(f"threshold mode must be 'fixed' or 'dynamic', got {self.mode!r}")

    def thresholds_for(self, class_id: int) -> ClassThresholds:
        return self.per_class.get(class_id, self.default)

    @classmethod
    def fixed(
        cls,
        table: Optional[ClassTable] = None,
        cls_high: float = 0.7,
        cls_low: float = 0.3,
        iou_high: float = 0.5,
        iou_low: float = 0.25,
    ) -> "ThresholdPolicy":
        t = ClassThresholds(cls_high, cls_low, iou_high, iou_low)
        per_class = {cid: t for cid in table.ids()} if table else {}
        return cls("fixed", per_class, t)

    def to_mapping(self) -> dict:
        def enc(t: ClassThresholds) -> dict:
            return {
                "cls_high": t.cls_high, "cls_low": t.cls_low,
                "iou_high": t.iou_high, "iou_low": t.iou_low,
            }

        return {
            "mode": self.mode,
            "default": enc(self.default),
            "per_class": {str(cid): enc(t) for cid, t in sorted(self.per_class.items())},
        }

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "ThresholdPolicy":
        def dec(rec: Mapping) -> ClassThresholds:
            return ClassThresholds(
                float(rec["cls_high"]), float(rec["cls_low"]),
                float(rec["iou_high"]), float(rec["iou_low"]),
            )

        return cls(
            str(doc["mode"]),
            {int(cid): dec(rec) for cid, rec in doc.get("per_class", {}).items()},
            dec(doc["default"]) if "default" in doc else ClassThresholds(0.7, 0.3, 0.5, 0.25),
        )


def fuse(
    outputs: Sequence[TeacherOutput],
    policy: ThresholdPolicy,
    nms_cfg: NmsConfig = NmsConfig(),
    table: Optional[ClassTable] = None,
) -> list[Detection]:
    """Merge per-category teacher detections into selected pseudo-labels.

    Per-teacher NMS first, then concatenation (categories are disjoint), then
    dual-threshold filtering: detections at or above both high thresholds are
    kept confident, those at or above both lows are kept with the ambiguous
    flag, the rest are dropped. Output sorted by (class_id, descending
    cls_score).
    """
    seen: dict[Category, int] = {}
    for out in outputs:
        if out.category in seen:
            raise ValueError(
                f"teachers {seen[out.category]} and {out.teacher_id} both claim "
                f"category {out.category}"
            )
        seen[out.category] = out.teacher_id
        if table is not None:
            out.validate_classes(table)
    merged: list[Detection] = []
    for out in outputs:
        merged.extend(nms(out.detections, nms_cfg.threshold, nms_cfg.metric))
    selected: list[Detection] = []
    for det in merged:
        t = policy.thresholds_for(det.class_id)
        if det.cls_score >= t.cls_high and det.iou_score >= t.iou_high:
            selected.append(replace(det, ambiguous=False))
        elif det.cls_score >= t.cls_low and det.iou_score >= t.iou_low:
            selected.append(replace(det, ambiguous=True))
    selected.sort(key=lambda d: (d.class_id, -d.cls_score))
    return selected


def confident(dets: Iterable[Detection]) -> list[Detection]:
    """Drop ambiguous-flagged detections (the default consumer behavior)."""
    return [d for d in dets if not d.ambiguous]


# ---------------------------------------------------------------------------
# dynamic threshold calibration


def _three_means(scores: Sequence[float], max_iter: int = 100) -> tuple[float, float]:
    """1-D 3-means on scores, seeded at the 0.1/0.5/0.9 quantiles.

    Returns (low, high): the midpoints between the bottom-two and top-two
    cluster centers. Degenerate all-equal input collapses both to that score.
    """
    arr = np.sort(np.asarray(scores, dtype=np.float64))
    if arr.size == 0:
        raise ValueError("cannot cluster an empty score set")
    if arr[0] == arr[-1]:
        return float(arr[0]), float(arr[0])
    centers = np.quantile(arr, [0.1, 0.5, 0.9])
    # collapse-proof: ensure strictly increasing seeds
    for i in (1, 2):
        if centers[i] <= centers[i - 1]:
            centers[i] = np.nextafter(centers[i - 1], np.inf)
    for _ in range(max_iter):
        bounds = (centers[:-1] + centers[1:]) / 2.0
        assign = np.searchsorted(bounds, arr, side="right")
        new_centers = centers.copy()
        for k in range(3):
            members = arr[assign == k]
            if members.size:
                new_centers[k] = members.mean()
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    low = float((centers[0] + centers[1]) / 2.0)
    high = float((centers[1] + centers[2]) / 2.0)
    return low, high


def calibrate_dynamic_thresholds(
    dets: Sequence[Detection] | Mapping[int, Sequence[Detection]],
    fallback: Optional[ThresholdPolicy] = None,
    min_count: int = 8,
) -> ThresholdPolicy:
    """Per-class dual thresholds from the score distribution.

    For every class with at least `min_count` detections, each score channel
    is clustered with 1-D 3-means; the high threshold is the midpoint between
    the top-two cluster centers and the low threshold the midpoint between
    the bottom-two. Classes below the minimum keep the fallback thresholds.
    Deterministic given input order.
    """
    if fallback is None:
        fallback = ThresholdPolicy.fixed()
    if isinstance(dets, Mapping):
        by_class = {cid: list(ds) for cid, ds in dets.items()}
    else:
        by_class = {}
        for d in dets:
            by_class.setdefault(d.class_id, []).append(d)
    per_class: dict[int, ClassThresholds] = {}
    for cid in sorted(by_class):
        ds = by_class[cid]
        if len(ds) < min_count:
            per_class[cid] = fallback.thresholds_for(cid)
            continue
        cls_low, cls_high = _three_means([d.cls_score for d in ds])
        iou_low, iou_high = _three_means([d.iou_score for d in ds])
        per_class[cid] = ClassThresholds(cls_high, cls_low, iou_high, iou_low)
    return ThresholdPolicy("dynamic", per_class, fallback.default)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ClassEval:
    ap: float
    precision: float
    recall: float
    tp: int
    fp: int
    n_gt: int


def match_frame(
    predictions: Sequence[Detection],
    ground_truth: Sequence[Detection],
    iou_thresholds: Mapping[int, float],
    metric: str = "3d",
) -> list[tuple[float, int, bool]]:
    """Greedy per-frame matching: predictions in descending score order claim
    the best still-unmatched same-class GT with IoU at or above the class
    threshold. Returns (score, class_id, is_tp) per prediction."""
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].cls_score, i))
    matched: set[int] = set()
    results = []
    for i in order:
        pred = predictions[i]
        thr = iou_thresholds.get(pred.class_id, 0.5)
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(ground_truth):
            if j in matched or gt.class_id != pred.class_id:
                continue
            iou = box_iou(pred.box, gt.box, metric)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= thr:
            matched.add(best_j)
            results.append((pred.cls_score, pred.class_id, True))
        else:
            results.append((pred.cls_score, pred.class_id, False))
    return results


def pr_curve(
    matches: Sequence[tuple[float, int, bool]], n_gt: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) over matches ranked by descending score."""
    if n_gt == 0 or not matches:
        return np.zeros(0), np.zeros(0)
    order = sorted(range(len(matches)), key=lambda i: (-matches[i][0], i))
    tp = np.cumsum([1 if matches[i][2] else 0 for i in order])
    fp = np.cumsum([0 if matches[i][2] else 1 for i in order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


N_RECALL_POSITIONS = 40


def ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """Average precision interpolated at 40 equally spaced recall positions."""
    if recall.size == 0:
        return 0.0
    ap = 0.0
    for j in range(1, N_RECALL_POSITIONS + 1):
        r = j / N_RECALL_POSITIONS
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / N_RECALL_POSITIONS


def precision_at_recall(recall: np.ndarray, precision: np.ndarray, target: float) -> float:
    """Best precision achievable at recall >= target; 0 when unreachable."""
    if recall.size == 0:
        return 1.0 if target <= 0.0 else 0.0
    mask = recall >= target - 1e-12
    return float(precision[mask].max()) if mask.any() else 0.0


def evaluate(
    pred_frames: Sequence[Sequence[Detection]],
    gt_frames: Sequence[Sequence[Detection]],
    iou_thresholds: Mapping[int, float],
    metric: str = "3d",
) -> dict[int, ClassEval]:
    """Per-class AP / precision / recall over a batch of aligned frames."""
    if len(pred_frames) != len(gt_frames):
        raise ValueError(
            f"got {len(pred_frames)} prediction frames but {len(gt_frames)} ground-truth frames"
        )
    pooled: list[tuple[float, int, bool]] = []
    n_gt: dict[int, int] = {}
    for preds, gts in zip(pred_frames, gt_frames):
        pooled.extend(match_frame(preds, gts, iou_thresholds, metric))
        for gt in gts:
            n_gt[gt.class_id] = n_gt.get(gt.class_id, 0) + 1
    out: dict[int, ClassEval] = {}
    class_ids = sorted(set(n_gt) | {cid for _, cid, _ in pooled})
    for cid in class_ids:
        cls_matches = [m for m in pooled if m[1] == cid]
        gt_count = n_gt.get(cid, 0)
        tp = sum(1 for m in cls_matches if m[2])
        fp = len(cls_matches) - tp
        recall_arr, precision_arr = pr_curve(cls_matches, gt_count)
        out[cid] = ClassEval(
            ap=ap_from_pr(recall_arr, precision_arr),
            precision=tp / max(tp + fp, 1),
            recall=tp / gt_count if gt_count else 0.0,
            tp=tp,
            fp=fp,
            n_gt=gt_count,
        )
    return out
