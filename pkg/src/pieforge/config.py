"""Pipeline configuration: one TOML file is the single source of truth.

Every module default lives here; CLI flags are overrides. Unknown keys are
rejected (typo protection), and the effective resolved config can be echoed
back out as TOML for provenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version dependent
    import tomli as tomllib

from .augment import WeakAugParams
from .classes import CATEGORIES, Category, ClassTable, default_class_table
from .fusion import ClassThresholds, NmsConfig, ThresholdPolicy


class ConfigError(ValueError):
    """Bad or unknown configuration content."""


@dataclass(frozen=True)
class NoiseProfile:
    center_jitter: float
    size_jitter: float
    yaw_jitter: float
    fn_rate: float
    fp_per_frame: float

    def __post_init__(self):
        if not (0.0 <= self.fn_rate <= 1.0):
            raise ConfigError(f"fn_rate must be within [0, 1], got {self.fn_rate}")
        if self.fp_per_frame < 0:
            raise ConfigError(f"fp_per_frame must be >= 0, got {self.fp_per_frame}")


@dataclass(frozen=True)
class HarnessNoiseConfig:
    specialist: NoiseProfile = NoiseProfile(0.15, 0.05, 0.05, 0.05, 0.5)
    generalist: NoiseProfile = NoiseProfile(0.5, 0.15, 0.15, 0.20, 2.0)
    score_noise: float = 0.1


@dataclass(frozen=True)
class ClassPriorConfig:
    count_mean: float
    length: float
    width: float
    height: float
    size_std: float
    r_min: float
    r_max: float
    density_10m: float
    falloff: float = -2.0


# sensible urban-scale object priors, keyed by the default class names;
# anything else falls back to "car"-like geometry
_BUILTIN_PRIORS: dict[str, ClassPriorConfig] = {
    "car": ClassPriorConfig(5.0, 4.5, 1.9, 1.6, 0.25, 5.0, 55.0, 60.0),
    "bus": ClassPriorConfig(1.0, 11.0, 2.9, 3.2, 0.5, 8.0, 55.0, 60.0),
    "truck": ClassPriorConfig(1.5, 8.0, 2.6, 3.0, 0.5, 8.0, 55.0, 60.0),
    "other_vehicle": ClassPriorConfig(1.0, 6.0, 2.2, 2.4, 0.4, 8.0, 55.0, 60.0),
    "pedestrian": ClassPriorConfig(4.0, 0.8, 0.8, 1.75, 0.1, 5.0, 40.0, 80.0),
    "motorcycle": ClassPriorConfig(1.5, 2.1, 0.9, 1.5, 0.15, 5.0, 45.0, 70.0),
    "bicycle": ClassPriorConfig(1.5, 1.8, 0.7, 1.5, 0.15, 5.0, 45.0, 70.0),
}
_FALLBACK_PRIOR = _BUILTIN_PRIORS["car"]


@dataclass(frozen=True)
class HarnessConfig:
    frames_per_epoch: int = 200
    epochs: int = 10
    background_points: int = 1500
    ema_demo: bool = True
    # demo-only momentum: small enough that convergence is visible over a
    # ten-epoch desk run (the blending itself uses [ema].alpha)
    ema_demo_alpha: float = 0.8
    noise: HarnessNoiseConfig = HarnessNoiseConfig()
    priors: Mapping[str, ClassPriorConfig] = field(default_factory=dict)

    def prior_for(self, class_name: str) -> ClassPriorConfig:
        if class_name in self.priors:
            return self.priors[class_name]
        return _BUILTIN_PRIORS.get(class_name, _FALLBACK_PRIOR)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    deg: float = 45.0
    threads: int = 1
    semidb_refresh_epochs: int = 5
    inject_into_labeled: bool = False
    crop: tuple[float, float, float, float, float, float] = (-75.0, -75.0, 75.0, 75.0, -5.0, 5.0)
    classes: ClassTable = field(default_factory=default_class_table)
    teacher_ids: Mapping[Category, int] = field(
        default_factory=lambda: {c: i + 1 for i, c in enumerate(CATEGORIES)}
    )
    nms: NmsConfig = NmsConfig()
    thresholds: ThresholdPolicy = field(default_factory=ThresholdPolicy.fixed)
    threshold_min_count: int = 8
    quotas: Mapping[int, int] = field(default_factory=dict)
    eval_metric: str = "3d"
    eval_iou: Mapping[int, float] = field(default_factory=dict)
    weak_aug: WeakAugParams = WeakAugParams()
    ema_alpha: float = 0.999
    anchor_patterns: tuple[str, ...] = ("anchor",)
    harness: HarnessConfig = HarnessConfig()

    def __post_init__(self):
        if self.deg <= 0 or abs(360.0 / self.deg - round(360.0 / self.deg)) > 1e-9:
            raise ConfigError(f"deg must divide 360 evenly, got {self.deg}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.semidb_refresh_epochs < 1:
            raise ConfigError(
                f"semidb_refresh_epochs must be >= 1, got {self.semidb_refresh_epochs}"
            )
        x0, y0, x1, y1, z0, z1 = self.crop
        if x1 < x0 or y1 < y0 or z1 < z0:
            raise ConfigError(f"crop range is not well-ordered: {self.crop}")
        if not (0.0 <= self.ema_alpha <= 1.0):
            raise ConfigError(f"ema alpha must be within [0, 1], got {self.ema_alpha}")
        for cid, q in self.quotas.items():
            if q < 0:
                raise ConfigError(f"quota for class {cid} must be >= 0, got {q}")

    def iou_threshold_for(self, class_id: int) -> float:
        if class_id in self.eval_iou:
            return self.eval_iou[class_id]
        name = self.classes.id_to_name.get(class_id, "")
        return 0.7 if name in ("car", "bus", "truck") else 0.5

    def eval_iou_table(self) -> dict[int, float]:
        return {cid: self.iou_threshold_for(cid) for cid in self.classes.ids()}

    def quota_table(self) -> dict[int, int]:
        return {cid: self.quotas.get(cid, 2) for cid in self.classes.ids()}


def default_config() -> PipelineConfig:
    return PipelineConfig()


# ---------------------------------------------------------------------------
# parsing


def _require_keys(section: Mapping[str, Any], allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{where}]" if where else f"unknown key(s) {unknown}")


def _class_table(raw: Mapping[str, Any]) -> ClassTable:
    spec = {}
    for name, val in raw.items():
        if not (isinstance(val, (list, tuple)) and len(val) == 2):
            raise ConfigError(f"[classes].{name} must be [class_id, category]")
        try:
            spec[name] = (int(val[0]), str(val[1]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[classes].{name}: {exc}") from None
    try:
        return ClassTable.from_spec(spec)
    except ValueError as exc:
        raise ConfigError(f"[classes]: {exc}") from None


def _thresholds(raw: Mapping[str, Any], table: ClassTable) -> tuple[ThresholdPolicy, int]:
    allowed = [
        "mode", "cls_high", "cls_low", "iou_high", "iou_low", "min_count", "per_class",
    ]
    _require_keys(raw, allowed, "thresholds")
    mode = raw.get("mode", "dynamic")
    default = ClassThresholds(
        float(raw.get("cls_high", 0.7)),
        float(raw.get("cls_low", 0.3)),
        float(raw.get("iou_high", 0.5)),
        float(raw.get("iou_low", 0.25)),
    )
    per_class: dict[int, ClassThresholds] = {cid: default for cid in table.ids()}
    for name, sub in raw.get("per_class", {}).items():
        if name not in table.name_to_id:
            raise ConfigError(f"[thresholds.per_class.{name}]: unknown class name")
        _require_keys(sub, ["cls_high", "cls_low", "iou_high", "iou_low"], f"thresholds.per_class.{name}")
        per_class[table.name_to_id[name]] = ClassThresholds(
            float(sub.get("cls_high", default.cls_high)),
            float(sub.get("cls_low", default.cls_low)),
            float(sub.get("iou_high", default.iou_high)),
            float(sub.get("iou_low", default.iou_low)),
        )
    policy = ThresholdPolicy(str(mode), per_class, default)
    return policy, int(raw.get("min_count", 8))


def _noise_profile(raw: Mapping[str, Any], where: str, base: NoiseProfile) -> NoiseProfile:
    allowed = ["center_jitter", "size_jitter", "yaw_jitter", "fn_rate", "fp_per_frame"]
    _require_keys(raw, allowed, where)
    return NoiseProfile(
        float(raw.get("center_jitter", base.center_jitter)),
        float(raw.get("size_jitter", base.size_jitter)),
        float(raw.get("yaw_jitter", base.yaw_jitter)),
        float(raw.get("fn_rate", base.fn_rate)),
        float(raw.get("fp_per_frame", base.fp_per_frame)),
    )


def _harness(raw: Mapping[str, Any], table: ClassTable) -> HarnessConfig:
    allowed = [
        "frames_per_epoch", "epochs", "background_points",
        "ema_demo", "ema_demo_alpha", "noise", "prior",
    ]
    _require_keys(raw, allowed, "harness")
    base = HarnessConfig()
    noise_raw = raw.get("noise", {})
    _require_keys(noise_raw, ["specialist", "generalist", "score_noise"], "harness.noise")
    noise = HarnessNoiseConfig(
        specialist=_noise_profile(
            noise_raw.get("specialist", {}), "harness.noise.specialist", base.noise.specialist
        ),
        generalist=_noise_profile(
            noise_raw.get("generalist", {}), "harness.noise.generalist", base.noise.generalist
        ),
        score_noise=float(noise_raw.get("score_noise", base.noise.score_noise)),
    )
    priors: dict[str, ClassPriorConfig] = {}
    for name, sub in raw.get("prior", {}).items():
        if name not in table.name_to_id:
            raise ConfigError(f"[harness.prior.{name}]: unknown class name")
        allowed_prior = [
            "count_mean", "length", "width", "height", "size_std",
            "r_min", "r_max", "density_10m", "falloff",
        ]
        _require_keys(sub, allowed_prior, f"harness.prior.{name}")
        fallback = _BUILTIN_PRIORS.get(name, _FALLBACK_PRIOR)
        priors[name] = ClassPriorConfig(
            float(sub.get("count_mean", fallback.count_mean)),
            float(sub.get("length", fallback.length)),
            float(sub.get("width", fallback.width)),
            float(sub.get("height", fallback.height)),
            float(sub.get("size_std", fallback.size_std)),
            float(sub.get("r_min", fallback.r_min)),
            float(sub.get("r_max", fallback.r_max)),
            float(sub.get("density_10m", fallback.density_10m)),
            float(sub.get("falloff", fallback.falloff)),
        )
    return HarnessConfig(
        frames_per_epoch=int(raw.get("frames_per_epoch", base.frames_per_epoch)),
        epochs=int(raw.get("epochs", base.epochs)),
        background_points=int(raw.get("background_points", base.background_points)),
        ema_demo=bool(raw.get("ema_demo", base.ema_demo)),
        ema_demo_alpha=float(raw.get("ema_demo_alpha", base.ema_demo_alpha)),
        noise=noise,
        priors=priors,
    )


def config_from_mapping(doc: Mapping[str, Any]) -> PipelineConfig:
    top_allowed = [
        "pipeline", "crop", "classes", "teachers", "nms", "thresholds",
        "quotas", "eval", "weak_aug", "ema", "harness",
    ]
    _require_keys(doc, top_allowed, "")

    pipe = doc.get("pipeline", {})
    _require_keys(
        pipe,
        ["seed", "deg", "threads", "semidb_refresh_epochs", "inject_into_labeled"],
        "pipeline",
    )

    table = _class_table(doc["classes"]) if "classes" in doc else default_class_table()

    crop_raw = doc.get("crop", {})
    _require_keys(crop_raw, ["range"], "crop")
    crop = tuple(float(v) for v in crop_raw.get("range", PipelineConfig.crop))
    if len(crop) != 6:
        raise ConfigError(f"[crop].range needs 6 values, got {len(crop)}")

    teachers_raw = doc.get("teachers", {})
    _require_keys(teachers_raw, [c.value for c in CATEGORIES], "teachers")
    teacher_ids = {c: i + 1 for i, c in enumerate(CATEGORIES)}
    for cat_name, tid in teachers_raw.items():
        teacher_ids[Category(cat_name)] = int(tid)

    nms_raw = doc.get("nms", {})
    _require_keys(nms_raw, ["metric", "threshold"], "nms")
    try:
        nms_cfg = NmsConfig(
            str(nms_raw.get("metric", "bev")), float(nms_raw.get("threshold", 0.1))
        )
    except ValueError as exc:
        raise ConfigError(f"[nms]: {exc}") from None

    policy, min_count = _thresholds(doc.get("thresholds", {}), table)

    quotas: dict[int, int] = {}
    for name, q in doc.get("quotas", {}).items():
        if name not in table.name_to_id:
            raise ConfigError(f"[quotas].{name}: unknown class name")
        quotas[table.name_to_id[name]] = int(q)

    eval_raw = dict(doc.get("eval", {}))
    metric = str(eval_raw.pop("metric", "3d"))
    if metric not in ("bev", "3d"):
        raise ConfigError(f"[eval].metric must be 'bev' or '3d', got {metric!r}")
    eval_iou: dict[int, float] = {}
    for name, thr in eval_raw.items():
        if name not in table.name_to_id:
            raise ConfigError(f"[eval].{name}: unknown class name")
        eval_iou[table.name_to_id[name]] = float(thr)

    wa_raw = doc.get("weak_aug", {})
    _require_keys(
        wa_raw, ["flip_x_prob", "flip_y_prob", "rot_range", "scale_min", "scale_max"], "weak_aug"
    )
    base_wa = WeakAugParams()
    weak_aug = WeakAugParams(
        flip_x_prob=float(wa_raw.get("flip_x_prob", base_wa.flip_x_prob)),
        flip_y_prob=float(wa_raw.get("flip_y_prob", base_wa.flip_y_prob)),
        rot_range=float(wa_raw.get("rot_range", base_wa.rot_range)),
        scale_range=(
            float(wa_raw.get("scale_min", base_wa.scale_range[0])),
            float(wa_raw.get("scale_max", base_wa.scale_range[1])),
        ),
    )

    ema_raw = doc.get("ema", {})
    _require_keys(ema_raw, ["alpha", "anchor_patterns"], "ema")

    try:
        return PipelineConfig(
            seed=int(pipe.get("seed", 0)),
            deg=float(pipe.get("deg", 45.0)),
            threads=int(pipe.get("threads", 1)),
            semidb_refresh_epochs=int(pipe.get("semidb_refresh_epochs", 5)),
            inject_into_labeled=bool(pipe.get("inject_into_labeled", False)),
            crop=crop,  # type: ignore[arg-type]
            classes=table,
            teacher_ids=teacher_ids,
            nms=nms_cfg,
            thresholds=policy,
            threshold_min_count=min_count,
            quotas=quotas,
            eval_metric=metric,
            eval_iou=eval_iou,
            weak_aug=weak_aug,
            ema_alpha=float(ema_raw.get("alpha", 0.999)),
            anchor_patterns=tuple(str(p) for p in ema_raw.get("anchor_patterns", ("anchor",))),
            harness=_harness(doc.get("harness", {}), table),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return config_from_mapping(doc)


def apply_overrides(
    config: PipelineConfig,
    seed: Optional[int] = None,
    deg: Optional[float] = None,
    threads: Optional[int] = None,
) -> PipelineConfig:
    out = config
    if seed is not None:
        out = replace(out, seed=int(seed))
    if deg is not None:
        out = replace(out, deg=float(deg))
    if threads is not None:
        out = replace(out, threads=int(threads))
    return out


# ---------------------------------------------------------------------------
# serialization (provenance echo)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ConfigError(f"cannot serialize non-finite float {v}")
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize value of type {type(v).__name__}")


def dump_config(config: PipelineConfig) -> str:
    """Render the effective config as TOML.

    Loading the dump yields a behaviorally equivalent config, and the
    dump is a fixed point: dump(load(dump(c))) == dump(c).
    """
    table = config.classes
    lines: list[str] = []

    def section(name: str, pairs: Sequence[tuple[str, Any]]) -> None:
        lines.append(f"[{name}]")
        for k, v in pairs:
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")

    section(
        "pipeline",
        [
            ("seed", config.seed),
            ("deg", config.deg),
            ("threads", config.threads),
            ("semidb_refresh_epochs", config.semidb_refresh_epochs),
            ("inject_into_labeled", config.inject_into_labeled),
        ],
    )
    section("crop", [("range", list(config.crop))])
    section(
        "classes",
        [
            (name, [cid, table.id_to_category[cid].value])
            for name, cid in sorted(table.name_to_id.items(), key=lambda kv: kv[1])
        ],
    )
    section("teachers", [(c.value, config.teacher_ids[c]) for c in CATEGORIES if c in config.teacher_ids])
    section("nms", [("metric", config.nms.metric), ("threshold", config.nms.threshold)])
    d = config.thresholds.default
    section(
        "thresholds",
        [
            ("mode", config.thresholds.mode),
            ("cls_high", d.cls_high),
            ("cls_low", d.cls_low),
            ("iou_high", d.iou_high),
            ("iou_low", d.iou_low),
            ("min_count", config.threshold_min_count),
        ],
    )
    for cid in table.ids():
        t = config.thresholds.thresholds_for(cid)
        if t != d:
            section(
                f"thresholds.per_class.{table.name_of(cid)}",
                [
                    ("cls_high", t.cls_high),
                    ("cls_low", t.cls_low),
                    ("iou_high", t.iou_high),
                    ("iou_low", t.iou_low),
                ],
            )
    section("quotas", [(table.name_of(cid), q) for cid, q in sorted(config.quotas.items())])
    section(
        "eval",
        [("metric", config.eval_metric)]
        + [(table.name_of(cid), thr) for cid, thr in sorted(config.eval_iou.items())],
    )
    section(
        "weak_aug",
        [
            ("flip_x_prob", config.weak_aug.flip_x_prob),
            ("flip_y_prob", config.weak_aug.flip_y_prob),
            ("rot_range", config.weak_aug.rot_range),
            ("scale_min", config.weak_aug.scale_range[0]),
            ("scale_max", config.weak_aug.scale_range[1]),
        ],
    )
    section("ema", [("alpha", config.ema_alpha), ("anchor_patterns", list(config.anchor_patterns))])
    h = config.harness
    section(
        "harness",
        [
            ("frames_per_epoch", h.frames_per_epoch),
            ("epochs", h.epochs),
            ("background_points", h.background_points),
            ("ema_demo", h.ema_demo),
            ("ema_demo_alpha", h.ema_demo_alpha),
        ],
    )
    section("harness.noise", [("score_noise", h.noise.score_noise)])
    for role, prof in (("specialist", h.noise.specialist), ("generalist", h.noise.generalist)):
        section(
            f"harness.noise.{role}",
            [
                ("center_jitter", prof.center_jitter),
                ("size_jitter", prof.size_jitter),
                ("yaw_jitter", prof.yaw_jitter),
                ("fn_rate", prof.fn_rate),
                ("fp_per_frame", prof.fp_per_frame),
            ],
        )
    for name, prior in sorted(h.priors.items()):
        section(
            f"harness.prior.{name}",
            [
                ("count_mean", prior.count_mean),
                ("length", prior.length),
                ("width", prior.width),
                ("height", prior.height),
                ("size_std", prior.size_std),
                ("r_min", prior.r_min),
                ("r_max", prior.r_max),
                ("density_10m", prior.density_10m),
                ("falloff", prior.falloff),
            ],
        )
    return "\n".join(lines)
