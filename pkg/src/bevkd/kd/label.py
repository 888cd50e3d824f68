"""Label KD: merge confident teacher predictions into the assignment GT set.

Teacher predictions arrive WITHOUT NMS.  The merged set carries per-box flags
for classification and regression assignment; the ablation variants reproduce
the four merge policies studied on top of the full merge:

* ``e`` — full merge, teacher boxes assign both cls and reg (the default);
* ``b`` — teacher boxes assign cls only;
* ``c`` — GT boxes highly overlapped (IoU > 0.7) by a kept teacher box stop
  assigning reg (teacher takes over those regression targets);
* ``d`` — teacher boxes whose quantized center cell duplicates an already
  assigned box stop assigning reg (first occupant of a cell wins).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..scenes import BoxLabel, assign_targets
from ..tensor import ConfigurationError

OVERLAP_DROP_IOU = 0.7


@dataclass
class MergedBox:
    box: BoxLabel
    use_for_cls: bool
    use_for_reg: bool
    source: str  # "gt" | "teacher"


def _iou(a, b):
    ix = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
    iy = min(a.cy + a.l / 2, b.cy + b.l / 2) - max(a.cy - a.l / 2, b.cy - b.l / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.w * a.l + b.w * b.l - inter)


def _cell(box, grid_side, voxel_size_out):
    ix = int(math.floor(box.cx / voxel_size_out))
    iy = int(math.floor(box.cy / voxel_size_out))
    if 0 <= ix < grid_side and 0 <= iy < grid_side:
        return iy * grid_side + ix
    return None


def label_kd_merge(gt_boxes, teacher_dets, tau, variant, grid_side, voxel_size_out):
    """Build the teacher-assisted GT set from raw (un-NMS'd) teacher boxes."""
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"label KD threshold must be in (0, 1), got {tau}")
    if variant not in ("b", "c", "d", "e"):
        raise ConfigurationError(f"unknown label KD variant {variant!r}")

    kept_teacher = [d for d in teacher_dets if d.score >= tau]
    teacher_boxes = [BoxLabel(d.cx, d.cy, d.w, d.l, d.class_id) for d in kept_teacher]

    merged = [MergedBox(b, True, True, "gt") for b in gt_boxes]
    if variant == "c":
        for m in merged:
            if any(_iou(m.box, t) > OVERLAP_DROP_IOU for t in teacher_boxes):
                m.use_for_reg = False

    if variant == "b":
        merged += [MergedBox(t, True, False, "teacher") for t in teacher_boxes]
    elif variant == "d":
        occupied = set()
        for m in merged:
            cell = _cell(m.box, grid_side, voxel_size_out)
            if m.use_for_reg and cell is not None:
                occupied.add(cell)
        for t in teacher_boxes:
            cell = _cell(t, grid_side, voxel_size_out)
            duplicate = cell is not None and cell in occupied
            if cell is not None and not duplicate:
                occupied.add(cell)
            merged.append(MergedBox(t, True, not duplicate, "teacher"))
    else:  # "c" and "e": teacher boxes assign both
        merged += [MergedBox(t, True, True, "teacher") for t in teacher_boxes]
    return merged


def merged_targets(merged, grid_side, voxel_size_out, num_classes):
    """Assign targets from a merged set, honoring per-box cls/reg flags."""
    boxes = [m.box for m in merged]
    flags = [(m.use_for_cls, m.use_for_reg) for m in merged]
    return assign_targets(boxes, grid_side, voxel_size_out, num_classes, flags=flags)
