"""Desk-scale BEV detector compression and knowledge-distillation benchmark."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad, ConfigurationError, UsageError
from .detector import Detector, DetectorConfig, DetectorOutput, build, detection_loss
from .scenes import (
    BoxLabel,
    PillarGrid,
    Scene,
    SceneConfig,
    TargetMaps,
    assign_targets,
    generate_scene,
    make_corpus,
    rasterize,
)
from .efficiency import EfficiencyReport, cpr, cpr_report, count_acts, count_flops, count_params, profile
from .evalmetrics import Detection, bev_iou, decode, mean_average_precision, nms
from .kd import KDRecipe

__all__ = [
    "Tensor",
    "no_grad",
    "ConfigurationError",
    "UsageError",
    "Detector",
    "DetectorConfig",
    "DetectorOutput",
    "build",
    "detection_loss",
    "BoxLabel",
    "PillarGrid",
    "Scene",
    "SceneConfig",
    "TargetMaps",
    "assign_targets",
    "generate_scene",
    "make_corpus",
    "rasterize",
    "EfficiencyReport",
    "cpr",
    "cpr_report",
    "count_acts",
    "count_flops",
    "count_params",
    "profile",
    "Detection",
    "bev_iou",
    "decode",
    "mean_average_precision",
    "nms",
    "KDRecipe",
]
