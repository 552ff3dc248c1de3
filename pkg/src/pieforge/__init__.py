"""pieforge: pie-sector point compensation, multi-teacher pseudo-label
fusion, and category-wise EMA checkpoint blending for LiDAR detection
pipelines, with a synthetic harness that verifies the pipeline at desk
scale."""

__version__ = "0.1.0"

from .classes import Category, ClassTable, default_class_table
from .geometry import (
    Box3D,
    Detection,
    Point,
    PointCloud,
    bev_iou,
    iou_3d,
    nms,
    points_in_box,
    transform_points,
)
from .augment import (
    Pie,
    WeakAugParams,
    WeakAugRecord,
    compensate,
    partition_pies,
    pie_id,
    pieaug_frame,
    weak_augment,
)
from .semidb import SemiDB, SemiDBEntry, build_semidb, inject_from_semidb
from .fusion import (
    NmsConfig,
    TeacherOutput,
    ThresholdPolicy,
    calibrate_dynamic_thresholds,
    evaluate,
    fuse,
)
from .ema import CategoryLayout, Checkpoint, adjust_split, cema_update
from .config import PipelineConfig, default_config, dump_config, load_config
from .harness import (
    ScenePrior,
    TeacherNoiseModel,
    fusion_advantage_trial,
    gen_scene,
    gen_teacher_output,
    run_mutual_loop,
)
from .io import FrameBundle, crop_to_range, read_cloud, read_labels, write_cloud, write_labels

__all__ = [
    "__version__",
    "Box3D", "Category", "CategoryLayout", "Checkpoint", "ClassTable",
    "Detection", "FrameBundle", "NmsConfig", "Pie", "PipelineConfig", "Point",
    "PointCloud", "ScenePrior", "SemiDB", "SemiDBEntry", "TeacherNoiseModel",
    "TeacherOutput", "ThresholdPolicy", "WeakAugParams", "WeakAugRecord",
    "adjust_split", "bev_iou", "build_semidb", "calibrate_dynamic_thresholds",
    "cema_update", "compensate", "crop_to_range", "default_class_table",
    "default_config", "dump_config", "evaluate", "fuse",
    "fusion_advantage_trial", "gen_scene", "gen_teacher_output",
    "inject_from_semidb", "iou_3d", "load_config", "nms", "partition_pies",
    "pie_id", "pieaug_frame", "points_in_box", "read_cloud", "read_labels",
    "run_mutual_loop", "transform_points", "weak_augment", "write_cloud",
    "write_labels",
]
