"""Logit and feature distillation losses plus the combined objective."""

from __future__ import annotations

import numpy as np

from .. import nn
from .. import tensor as T
from ..tensor import ConfigurationError, Tensor

MASK_EPS = 1e-6


class KDError(RuntimeError):
    """Raised when a loss term goes non-finite; names the offending term."""


class FeatureAdapter(nn.Module):
    """1x1 conv + BN + ReLU aligning student feature channels to the teacher."""

    def __init__(self, in_channels, out_channels, rng):
        self.conv = nn.Conv2d(in_channels, out_channels, 1, rng)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


def _masked_sq_mean(diff, mask):
    m = Tensor(np.ascontiguousarray(np.broadcast_to(mask, diff.shape)))
    return T.tsum(m * diff * diff) * (1.0 / (float(m.data.sum()) + MASK_EPS))


def logit_kd_loss(student_out, teacher_out, mask, alpha1, alpha2, reg_support="mask"):
    """Masked squared error on classification maps, optional L1 on regression.

    The student classification map is bilinearly resized to the teacher grid
    when output sides differ; the regression term is skipped when alpha2 is 0
    (always the case for input-compressed students) and otherwise evaluated
    on ``reg_support``: everywhere ("all") or where the mask is positive.
    """
    pt_cls = teacher_out.p_cls.data
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != pt_cls.shape:
        raise ConfigurationError(f"mask shape {mask.shape} does not match teacher {pt_cls.shape}")
    ps_cls = student_out.p_cls
    if ps_cls.shape[-2:] != pt_cls.shape[-2:]:
        ps_cls = T.bilinear_resize(ps_cls, pt_cls.shape[-2:])
    l_cls = _masked_sq_mean(ps_cls - pt_cls, mask)

    if alpha2 == 0.0:
        return l_cls, Tensor(0.0)
    if student_out.p_reg.shape != teacher_out.p_reg.shape:
        raise ConfigurationError("regression KD requires matching output grids (alpha2 must be 0)")
    if reg_support == "all":
        support = np.ones((mask.shape[0], 1) + mask.shape[2:], dtype=np.float64)
    else:
        support = (mask.max(axis=1, keepdims=True) > 0.0).astype(np.float64)
    m4 = np.ascontiguousarray(np.broadcast_to(support, student_out.p_reg.shape))
    l_reg = T.tsum(Tensor(m4) * T.absolute(student_out.p_reg - teacher_out.p_reg)) * (
        1.0 / (float(m4.sum()) + MASK_EPS)
    )
    return l_cls, l_reg


def _boxes_to_rois(boxes, voxel_size):
    rois = np.array(
        [[b.cx - b.w / 2, b.cy - b.l / 2, b.cx + b.w / 2, b.cy + b.l / 2] for _, b in boxes],
        dtype=np.float64,
    ).reshape(-1, 4)
    return rois / voxel_size, np.array([i for i, _ in boxes], dtype=np.int64)


def _pairwise_distances(vecs):
    # vecs: [n, d] tensor -> [n, n] Euclidean distance matrix
    n = vecs.shape[0]
    a = vecs.reshape(n, 1, vecs.shape[1])
    b = vecs.reshape(1, n, vecs.shape[1])
    sq = T.tsum((a - b) ** 2, axis=2)
    return T.sqrt(sq + 1e-12)


def feature_kd_loss(
    variant,
    student_feat,
    teacher_feat,
    adapter=None,
    *,
    student_voxel_out=None,
    teacher_voxel_out=None,
    gt_boxes=None,
    teacher_boxes=None,
    fg_mask=None,
    relation_weight=0.1,
    roi_size=7,
    roi_samples=2,
    counters=None,
):
    """Feature imitation loss on the last BFE map.

    * ``fitnet`` — full-map MSE (resize for input-compressed students, channel
      adapter for width-compressed ones);
    * ``fg`` — MSE restricted to the binary GT-heatmap mask;
    * ``mimic`` — MSE between RoI-aligned crops at GT boxes, no interpolation;
    * ``gid_f`` — mimic-style crops at teacher post-NMS boxes plus a pairwise
      distance-matrix relation term.

    Boxes arrive as (batch_index, box) pairs in meters; crops are extracted
    from each map at its own grid resolution.
    """
    ft = teacher_feat.data if isinstance(teacher_feat, Tensor) else np.asarray(teacher_feat)
    counters = counters if counters is not None else {}

    if variant in ("fitnet", "fg"):
        fs = student_feat
        if fs.shape[-2:] != ft.shape[-2:]:
            fs = T.bilinear_resize(fs, ft.shape[-2:])
        if adapter is not None:
            fs = adapter(fs)
        if fs.shape != ft.shape:
            raise ConfigurationError(
                f"feature shapes {fs.shape} vs {ft.shape} differ; adapter required"
            )
        diff = fs - ft
        if variant == "fitnet":
            return T.tsum(diff * diff) * (1.0 / diff.size)
        return _masked_sq_mean(diff, np.asarray(fg_mask, dtype=np.float64))

    if variant in ("mimic", "gid_f"):
        boxes = gt_boxes if variant == "mimic" else teacher_boxes
        if not boxes:
            counters["empty_roi_batches"] = counters.get("empty_roi_batches", 0) + 1
            return Tensor(0.0)
        fs_map = adapter(student_feat) if adapter is not None else student_feat
        if fs_map.shape[1] != ft.shape[1]:
            raise ConfigurationError("channel mismatch between student and teacher features")
        rois_s, idx = _boxes_to_rois(boxes, student_voxel_out)
        rois_t, _ = _boxes_to_rois(boxes, teacher_voxel_out)
        crops_s = T.roi_align(fs_map, rois_s, idx, out_size=roi_size, samples=roi_samples)
        with T.no_grad():
            crops_t = T.roi_align(Tensor(ft), rois_t, idx, out_size=roi_size, samples=roi_samples)
        diff = crops_s - crops_t.data
        loss = T.tsum(diff * diff) * (1.0 / diff.size)
        if variant == "gid_f" and len(boxes) >= 2 and relation_weight:
            n = len(boxes)
            vec_s = crops_s.reshape((n, -1))
            vec_t = Tensor(crops_t.data.reshape(n, -1))
            d_s = _pairwise_distances(vec_s)
            d_t = _pairwise_distances(vec_t)
            off_diag = 1.0 - np.eye(n)
            relation = T.tsum(Tensor(off_diag) * T.absolute(d_s - d_t)) * (1.0 / (n * (n - 1)))
            loss = loss + relation_weight * relation
        return loss

    raise ConfigurationError(f"unknown feature KD variant {variant!r}")


def total_loss(det_parts, l_cls_kd, l_reg_kd, l_feat_kd, lam, alpha1, alpha2, alpha3):
    """Combined objective; inactive terms contribute exactly zero."""
    terms = {
        "det_cls": (det_parts.cls, 1.0),
        "det_reg": (det_parts.reg, lam),
        "kd_cls": (l_cls_kd, alpha1),
        "kd_reg": (l_reg_kd, alpha2),
        "kd_feat": (l_feat_kd, alpha3),
    }
    total = None
    parts = {}
    for name, (term, weight) in terms.items():
        value = float(term.data) if isinstance(term, Tensor) else float(term)
        if not np.isfinite(value):
            raise KDError(f"loss term {name!r} is non-finite ({value})")
        parts[name] = value
        if isinstance(term, Tensor) and weight != 0.0:
            contrib = term * weight
            total = contrib if total is None else total + contrib
    if total is None:
        total = Tensor(0.0)
    parts["total"] = float(total.data)
    return total, parts
