"""Desk-scale verification rig: synthetic scenes and noisy synthetic teachers
stand in for neural detectors so the fusion and augmentation logic can be
exercised statistically.

Nothing here trains a network; the rig validates pipeline behavior, not
benchmark scores, and the reports it emits say so. Scenes follow a simple
physical prior: objects get fewer points the farther they sit from the
sensor (surface density falls off as r to a configurable exponent, -2 by
default), which is exactly the imbalance the pie compensation targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .augment import pieaug_frame, weak_augment
from .classes import CATEGORIES, Category, ClassTable
from .config import ClassPriorConfig, NoiseProfile, PipelineConfig
from .ema import Checkpoint, CategoryLayout, cema_update
from .fusion import (
    ClassEval,
    TeacherOutput,
    ThresholdPolicy,
    calibrate_dynamic_thresholds,
    confident,
    evaluate,
    fuse,
    match_frame,
    pr_curve,
    precision_at_recall,
)
from .geometry import (
    Box3D,
    Detection,
    PointCloud,
    bev_iou,
    iou_3d,
    points_in_footprint_mask,
)
from .io import FrameBundle
from .parallel import ordered_map
from .semidb import build_semidb, inject_from_semidb

GENERALIST_TEACHER_ID = 0

_PLACEMENT_TRIES = 60
_MIN_SIZE = 0.2
_INTERIOR_MARGIN = 0.998  # keep sampled points strictly inside their box


@dataclass(frozen=True)
class ScenePrior:
    """Per-class generation parameters plus scene-level extras."""

    class_priors: Mapping[int, ClassPriorConfig]
    crop: tuple[float, float, float, float, float, float]
    background_points: int = 1500

    def __post_init__(self):
        x0, y0, x1, y1, _, _ = self.crop
        reach = min(abs(x0), abs(y0), abs(x1), abs(y1))
        for cid, p in self.class_priors.items():
            if p.density_10m <= 0:
                raise ValueError(f"class {cid}: density_10m must be > 0")
            if not (0.0 < p.r_min < p.r_max):
                raise ValueError(f"class {cid}: bad annulus ({p.r_min}, {p.r_max})")
            if p.r_max > reach:
                raise ValueError(
                    f"class {cid}: annulus r_max={p.r_max} exceeds crop reach {reach}"
                )


def scene_prior_from_config(config: PipelineConfig) -> ScenePrior:
    priors = {
        cid: config.harness.prior_for(config.classes.name_of(cid))
        for cid in config.classes.ids()
    }
    return ScenePrior(priors, config.crop, config.harness.background_points)


@dataclass(frozen=True)
class TeacherNoiseModel:
    """Noise profiles per category plus the shared score-noise scale.

    A specialized teacher draws from `profiles[its category]`; a generalist
    baseline uses one (worse) profile for every category.
    """

    profiles: Mapping[Category, NoiseProfile]
    score_noise: float = 0.1

    def profile_for(self, category: Category) -> NoiseProfile:
        return self.profiles[Category(category)]


def specialist_noise_model(config: PipelineConfig) -> TeacherNoiseModel:
    prof = config.harness.noise.specialist
    return TeacherNoiseModel({c: prof for c in CATEGORIES}, config.harness.noise.score_noise)


def generalist_noise_model(config: PipelineConfig) -> TeacherNoiseModel:
    prof = config.harness.noise.generalist
    return TeacherNoiseModel({c: prof for c in CATEGORIES}, config.harness.noise.score_noise)


# ---------------------------------------------------------------------------
# scene generation


def _expected_points(prior: ClassPriorConfig, l: float, w: float, h: float, r: float) -> float:
    face_area = h * (l + w) / 2.0
    return prior.density_10m * face_area * (r / 10.0) ** prior.falloff


def gen_scene(prior: ScenePrior, seed, frame_id: str = "synthetic") -> FrameBundle:
    """Deterministic synthetic frame: collision-free ground-truth boxes whose
    per-object point counts follow the density falloff law (Poisson noise),
    plus ground clutter outside every footprint."""
    rng = np.random.default_rng(seed)
    boxes: list[Box3D] = []
    labels: list[Detection] = []
    object_points: list[np.ndarray] = []
    for cid in sorted(prior.class_priors):
        p = prior.class_priors[cid]
        count = int(rng.poisson(p.count_mean))
        for _ in range(count):
            box = None
            for _ in range(_PLACEMENT_TRIES):
                r = float(rng.uniform(p.r_min, p.r_max))
                theta = float(rng.uniform(-math.pi, math.pi))
                l = max(_MIN_SIZE, float(rng.normal(p.length, p.size_std)))
                w = max(_MIN_SIZE, float(rng.normal(p.width, p.size_std)))
                h = max(_MIN_SIZE, float(rng.normal(p.height, p.size_std)))
                cand = Box3D(
                    r * math.cos(theta),
                    r * math.sin(theta),
                    h / 2.0 + float(rng.normal(0.0, 0.02)),
                    l, w, h,
                    float(rng.uniform(-math.pi, math.pi)),
                )
                if all(bev_iou(cand, other) == 0.0 for other in boxes):
                    box = cand
                    break
            if box is None:
                continue  # crowded scene; skip rather than overlap
            boxes.append(box)
            labels.append(Detection(box, cid))
            radius = math.hypot(box.cx, box.cy)
            n_pts = int(rng.poisson(_expected_points(p, box.l, box.w, box.h, radius)))
            local = rng.uniform(-0.5, 0.5, size=(n_pts, 3)) * _INTERIOR_MARGIN
            local *= np.array([box.l, box.w, box.h])
            c, s = math.cos(box.yaw), math.sin(box.yaw)
            world = np.empty((n_pts, 4), dtype=np.float64)
            world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
            world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
            world[:, 2] = local[:, 2] + box.cz
            world[:, 3] = rng.uniform(0.0, 1.0, size=n_pts)
            object_points.append(world.astype(np.float32))

    x0, y0, x1, y1, z0, z1 = prior.crop
    n_bg = prior.background_points
    bg = np.empty((n_bg, 4), dtype=np.float64)
    bg[:, 0] = rng.uniform(x0, x1, size=n_bg)
    bg[:, 1] = rng.uniform(y0, y1, size=n_bg)
    bg[:, 2] = np.clip(rng.normal(0.0, 0.03, size=n_bg), z0, z1)
    bg[:, 3] = rng.uniform(0.0, 1.0, size=n_bg)
    bg32 = bg.astype(np.float32)
    if boxes and n_bg:
        keep = np.ones(n_bg, dtype=bool)
        bg_cloud = PointCloud(bg32, frame_id, copy=False)
        for box in boxes:
            keep &= ~points_in_footprint_mask(bg_cloud, box)
        bg32 = bg32[keep]

    parts = [bg32] + object_points
    cloud = PointCloud(np.concatenate(parts, axis=0), frame_id, copy=False)
    return FrameBundle(frame_id, cloud, labels)


# ---------------------------------------------------------------------------
# synthetic teachers


def gen_teacher_output(
    bundle: FrameBundle,
    noise: TeacherNoiseModel,
    category: Category,
    seed,
    table: ClassTable,
    teacher_id: int = 1,
) -> TeacherOutput:
    """Jittered detections for one category: misses GT at the false-negative
    rate, perturbs survivors, and adds Poisson false positives. Scores model
    a calibrated detector: clamp(IoU to the matching GT + Gaussian noise)."""
    category = Category(category)
    prof = noise.profile_for(category)
    rng = np.random.default_rng(seed)
    class_ids = table.ids_for(category)
    allowed = set(class_ids)
    gts = bundle.labels or []
    dets: list[Detection] = []

    def scored(box: Box3D, cid: int) -> Detection:
        best = 0.0
        for gt in gts:
            if gt.class_id == cid:
                iou = iou_3d(box, gt.box)
                if iou > best:
                    best = iou
        cls_score = float(np.clip(best + rng.normal(0.0, noise.score_noise), 0.0, 1.0))
        iou_score = float(np.clip(best + rng.normal(0.0, noise.score_noise), 0.0, 1.0))
        return Detection(box, cid, cls_score=cls_score, iou_score=iou_score, teacher_id=teacher_id)

    for gt in gts:
        if gt.class_id not in allowed:
            continue
        if rng.random() < prof.fn_rate:
            continue
        b = gt.box
        jitter = rng.normal(0.0, prof.center_jitter, size=3) if prof.center_jitter else np.zeros(3)
        sizes = rng.normal(0.0, prof.size_jitter, size=3) if prof.size_jitter else np.zeros(3)
        dyaw = float(rng.normal(0.0, prof.yaw_jitter)) if prof.yaw_jitter else 0.0
        box = Box3D(
            b.cx + float(jitter[0]),
            b.cy + float(jitter[1]),
            b.cz + float(jitter[2]),
            max(_MIN_SIZE, b.l + float(sizes[0])),
            max(_MIN_SIZE, b.w + float(sizes[1])),
            max(_MIN_SIZE, b.h + float(sizes[2])),
            b.yaw + dyaw,
        )
        dets.append(scored(box, gt.class_id))

    n_fp = int(rng.poisson(prof.fp_per_frame)) if prof.fp_per_frame else 0
    for _ in range(n_fp):
        cid = int(class_ids[int(rng.integers(len(class_ids)))])
        r = float(rng.uniform(5.0, 50.0))
        theta = float(rng.uniform(-math.pi, math.pi))
        l = max(_MIN_SIZE, float(rng.normal(4.0, 1.0)))
        w = max(_MIN_SIZE, float(rng.normal(1.8, 0.5)))
        h = max(_MIN_SIZE, float(rng.normal(1.6, 0.3)))
        box = Box3D(
            r * math.cos(theta), r * math.sin(theta), h / 2.0,
            l, w, h, float(rng.uniform(-math.pi, math.pi)),
        )
        dets.append(scored(box, cid))
    return TeacherOutput(teacher_id, category, dets)


# ---------------------------------------------------------------------------
# mutual-learning loop


@dataclass
class EpochMetrics:
    epoch: int
    n_frames: int
    per_class: dict[int, ClassEval]
    fused_precision: float
    fused_recall: float
    n_confident: int
    n_ambiguous: int
    best_single_precision: float
    generalist_precision: float
    teacher_center_jitter: float
    skill_gap: float
    semidb_entries: Optional[int] = None
    compensation: Optional[dict[str, int]] = None

    @property
    def mean_ap(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([e.ap for e in self.per_class.values()]))


@dataclass
class _FrameSim:
    gt: list[Detection]
    cloud: PointCloud
    teacher_outputs: list[TeacherOutput]
    generalist: TeacherOutput


def _micro_pr(
    matches: Sequence[tuple[float, int, bool]], n_gt: int
) -> tuple[float, float]:
    tp = sum(1 for m in matches if m[2])
    fp = len(matches) - tp
    precision = tp / max(tp + fp, 1)
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall


def _simulate_frame(
    config: PipelineConfig,
    prior: ScenePrior,
    spec_noise: TeacherNoiseModel,
    gen_noise: TeacherNoiseModel,
    epoch: int,
    frame: int,
    inject_db=None,
) -> _FrameSim:
    base = config.seed
    bundle = gen_scene(prior, [base, epoch, frame, 0], f"e{epoch:03d}_f{frame:05d}")
    cloud, gt, _record = weak_augment(
        bundle.cloud, bundle.labels or [], [base, epoch, frame, 1], config.weak_aug
    )
    if inject_db is not None and len(inject_db):
        cloud, gt, _ = inject_from_semidb(
            cloud, gt, inject_db, config.quota_table(), [base, epoch, frame, 9]
        )
    aug = FrameBundle(bundle.frame_id, cloud, gt)
    outputs = []
    for t_idx, category in enumerate(CATEGORIES):
        outputs.append(
            gen_teacher_output(
                aug, spec_noise, category, [base, epoch, frame, 2 + t_idx],
                config.classes, teacher_id=config.teacher_ids.get(category, t_idx + 1),
            )
        )
    gen_dets: list[Detection] = []
    for t_idx, category in enumerate(CATEGORIES):
        out = gen_teacher_output(
            aug, gen_noise, category, [base, epoch, frame, 5 + t_idx],
            config.classes, teacher_id=GENERALIST_TEACHER_ID,
        )
        gen_dets.extend(out.detections)
    # single baseline teacher covering every class; the category tag is
    # nominal because this output never passes through fuse()
    generalist = TeacherOutput(GENERALIST_TEACHER_ID, Category.VEHICLE, gen_dets)
    return _FrameSim(gt, cloud, outputs, generalist)


def _epoch_policy(config: PipelineConfig, frames: Sequence[_FrameSim]) -> ThresholdPolicy:
    if config.thresholds.mode != "dynamic":
        return config.thresholds
    pooled: list[Detection] = []
    for sim in frames:
        for out in sim.teacher_outputs:
            pooled.extend(out.detections)
    return calibrate_dynamic_thresholds(
        pooled, fallback=config.thresholds, min_count=config.threshold_min_count
    )


def _epoch_stats(
    config: PipelineConfig,
    frames: Sequence[_FrameSim],
    policy: ThresholdPolicy,
) -> tuple[EpochMetrics, list[list[Detection]]]:
    iou_table = config.eval_iou_table()
    metric = config.eval_metric
    fused_frames: list[list[Detection]] = []
    fused_matches: list[tuple[float, int, bool]] = []
    single_matches: dict[int, list[tuple[float, int, bool]]] = {}
    n_gt = 0
    n_conf = n_amb = 0
    for sim in frames:
        fused = fuse(sim.teacher_outputs, policy, config.nms, config.classes)
        keep = confident(fused)
        n_conf += len(keep)
        n_amb += len(fused) - len(keep)
        fused_frames.append(fused)
        fused_matches.extend(match_frame(keep, sim.gt, iou_table, metric))
        n_gt += len(sim.gt)
        for out in sim.teacher_outputs + [sim.generalist]:
            single_matches.setdefault(out.teacher_id, []).extend(
                match_frame(out.detections, sim.gt, iou_table, metric)
            )
    fused_precision, fused_recall = _micro_pr(fused_matches, n_gt)
    singles = {}
    for tid, matches in single_matches.items():
        recall_arr, precision_arr = pr_curve(matches, n_gt)
        singles[tid] = precision_at_recall(recall_arr, precision_arr, fused_recall)
    best_single = max(singles.values()) if singles else 0.0
    per_class = evaluate(
        [confident(f) for f in fused_frames], [sim.gt for sim in frames], iou_table, metric
    )
    metrics = EpochMetrics(
        epoch=-1,
        n_frames=len(frames),
        per_class=per_class,
        fused_precision=fused_precision,
        fused_recall=fused_recall,
        n_confident=n_conf,
        n_ambiguous=n_amb,
        best_single_precision=best_single,
        generalist_precision=singles.get(GENERALIST_TEACHER_ID, 0.0),
        teacher_center_jitter=0.0,
        skill_gap=0.0,
    )
    return metrics, fused_frames


def run_mutual_loop(config: PipelineConfig, epochs: Optional[int] = None) -> list[EpochMetrics]:
    """Per epoch: synthesize frames, run the teachers, fuse, evaluate, and
    refresh the semi-DB on the configured cadence. Teacher accuracy starts at
    the generalist level and is pulled toward the specialist level each epoch
    by the category-wise EMA recurrence, so the series shows pseudo-label
    quality improving as the loop runs. With inject_into_labeled set, frames
    additionally receive copy-paste samples from the latest semi-DB refresh.
    Deterministic for a fixed seed and independent of the thread count."""
    if epochs is None:
        epochs = config.harness.epochs
    prior = scene_prior_from_config(config)
    gen_noise = generalist_noise_model(config)
    target_noise = specialist_noise_model(config)
    try:
        layout = CategoryLayout.from_class_table(config.classes)
    except ValueError:
        layout = CategoryLayout({Category.VEHICLE: (1, 1)})

    # per-category "skill" checkpoints, EMA-blended toward the student target
    skill = {
        c: Checkpoint({"skill/center_jitter": np.array([gen_noise.profile_for(c).center_jitter])})
        for c in CATEGORIES
    }
    student_skill = {
        c: Checkpoint({"skill/center_jitter": np.array([target_noise.profile_for(c).center_jitter])})
        for c in CATEGORIES
    }

    series: list[EpochMetrics] = []
    inject_db = None
    for epoch in range(epochs):
        if config.harness.ema_demo:
            profiles = {}
            for c in CATEGORIES:
                base_prof = target_noise.profile_for(c)
                jitter = float(skill[c]["skill/center_jitter"][0])
                profiles[c] = NoiseProfile(
                    jitter, base_prof.size_jitter, base_prof.yaw_jitter,
                    base_prof.fn_rate, base_prof.fp_per_frame,
                )
            spec_noise = TeacherNoiseModel(profiles, target_noise.score_noise)
        else:
            spec_noise = target_noise

        epoch_db = inject_db if config.inject_into_labeled else None
        frames = ordered_map(
            lambda f: _simulate_frame(config, prior, spec_noise, gen_noise, epoch, f, epoch_db),
            list(range(config.harness.frames_per_epoch)),
            config.threads,
        )
        policy = _epoch_policy(config, frames)
        metrics, fused_frames = _epoch_stats(config, frames, policy)
        metrics.epoch = epoch
        metrics.teacher_center_jitter = float(
            skill[Category.VEHICLE]["skill/center_jitter"][0]
        )
        metrics.skill_gap = abs(
            metrics.teacher_center_jitter
            - float(student_skill[Category.VEHICLE]["skill/center_jitter"][0])
        )

        if epoch % config.semidb_refresh_epochs == 0:
            bank = []
            comp_totals: dict[str, int] = {}
            all_labels: list[Detection] = []
            for sim, fused in zip(frames, fused_frames):
                keep = confident(fused)
                frame_bank, stats, _ = pieaug_frame(sim.cloud, keep, config.deg)
                bank.extend(frame_bank)
                all_labels.extend(keep)
                for k, v in stats.as_dict().items():
                    comp_totals[k] = comp_totals.get(k, 0) + v
            db = build_semidb(all_labels, bank)
            metrics.semidb_entries = len(db)
            metrics.compensation = comp_totals
            inject_db = db

        if config.harness.ema_demo:
            for c in CATEGORIES:
                skill[c] = cema_update(
                    skill[c], student_skill[c], config.harness.ema_demo_alpha,
                    layout, c, anchor_patterns=config.anchor_patterns,
                )
        series.append(metrics)
    return series


# ---------------------------------------------------------------------------
# fusion-advantage trials (the statistical oracle for the acceptance gate)


@dataclass(frozen=True)
class TrialResult:
    fused_precision: float
    fused_recall: float
    best_single_precision: float
    generalist_precision: float

    @property
    def advantage(self) -> bool:
        return self.fused_precision > self.best_single_precision


def fusion_advantage_trial(
    config: PipelineConfig, trial: int, n_frames: Optional[int] = None
) -> TrialResult:
    """One seeded trial: fused + filtered pseudo-labels versus the best
    single synthetic teacher at the fused operating recall.

    Single teachers are given their full score-ranked PR curve and credited
    with the best precision they can reach at recall >= the fused recall
    (zero when they cannot reach it, the standard PR convention)."""
    if n_frames is None:
        n_frames = config.harness.frames_per_epoch
    prior = scene_prior_from_config(config)
    spec_noise = specialist_noise_model(config)
    gen_noise = generalist_noise_model(config)
    frames = ordered_map(
        lambda f: _simulate_frame(config, prior, spec_noise, gen_noise, 1000 + trial, f),
        list(range(n_frames)),
        config.threads,
    )
    policy = _epoch_policy(config, frames)
    metrics, _ = _epoch_stats(config, frames, policy)
    return TrialResult(
        fused_precision=metrics.fused_precision,
        fused_recall=metrics.fused_recall,
        best_single_precision=metrics.best_single_precision,
        generalist_precision=metrics.generalist_precision,
    )
