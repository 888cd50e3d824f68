"""Distillation machinery: logit/feature/label KD and teacher-guided init."""

from .recipe import KDRecipe, ResolvedRecipe
from .masks import make_mask
from .losses import KDError, logit_kd_loss, feature_kd_loss, total_loss, FeatureAdapter
from .label import MergedBox, label_kd_merge, merged_targets
from .tgi import tgi_remap, select_by_l1, select_by_bn_scale
from .channelnorm import channel_l1_norms, write_channel_norms_csv

__all__ = [
    "KDRecipe",
    "ResolvedRecipe",
    "make_mask",
    "KDError",
    "logit_kd_loss",
    "feature_kd_loss",
    "total_loss",
    "FeatureAdapter",
    "MergedBox",
    "label_kd_merge",
    "merged_targets",
    "tgi_remap",
    "select_by_l1",
    "select_by_bn_scale",
    "channel_l1_norms",
    "write_channel_norms_csv",
]
