"""Heatmap decoding, greedy NMS, BEV IoU and average precision.

The AP here is a plain axis-aligned BEV metric (boxes carry no heading); it
is reported as "toy-mAP" everywhere to make the surrogate explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# matching IoU per class id (large, small)
DEFAULT_AP_IOU = {0: 0.5, 1: 0.25}


@dataclass
class Detection:
    cx: float
    cy: float
    w: float
    l: float
    class_id: int
    score: float
    cell: int = -1  # flat origin-cell index; -1 when not decoded from a map


def _strict_local_max(score_map):
    """Boolean map of cells strictly greater than all existing 3x3 neighbours."""
    g = score_map.shape[0]
    padded = np.full((g + 2, g + 2), -np.inf)
    padded[1:-1, 1:-1] = score_map
    out = np.ones((g, g), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            out &= score_map > padded[1 + dy : 1 + dy + g, 1 + dx : 1 + dx + g]
    return out


def decode(output, voxel_size_out, score_thresh=0.1, max_dets=50):
    """Strict 3x3 peak decoding of a single-sample DetectorOutput.

    Plateaus are never peaks; candidates sort by descending score with ties
    broken by lowest flat cell index.
    """
    p_cls = output.p_cls.data[0]
    p_reg = output.p_reg.data[0]
    c_classes, g, _ = p_cls.shape
    candidates = []
    for c in range(c_classes):
        peaks = _strict_local_max(p_cls[c])
        ys, xs = np.nonzero(peaks & (p_cls[c] >= score_thresh))
        for iy, ix in zip(ys.tolist(), xs.tolist()):
            flat = (c * g + iy) * g + ix
            candidates.append((-p_cls[c, iy, ix], flat, c, iy, ix))
    candidates.sort()
    dets = []
    for neg_score, flat, c, iy, ix in candidates[:max_dets]:
        dx, dy, logw, logl = p_reg[:, iy, ix]
        dets.append(
            Detection(
                cx=(ix + 0.5 + dx) * voxel_size_out,
                cy=(iy + 0.5 + dy) * voxel_size_out,
                w=math.exp(logw),
                l=math.exp(logl),
                class_id=c,
                score=-neg_score,
                cell=flat,
            )
        )
    return dets


def bev_iou(a, b):
    """Axis-aligned intersection over union of two (cx, cy, w, l) boxes."""
    ix = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
    iy = min(a.cy + a.l / 2, b.cy + b.l / 2) - max(a.cy - a.l / 2, b.cy - b.l / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.w * a.l + b.w * b.l - inter
    return inter / union


def _det_order_key(seq_and_det):
    i, d = seq_and_det
    return (-d.score, d.cell if d.cell >= 0 else i, i)


def nms(dets, iou_thresh):
    """Per-class greedy suppression of detections with IoU above threshold."""
    kept = []
    by_class = {}
    for i, d in enumerate(dets):
        by_class.setdefault(d.class_id, []).append((i, d))
    for class_id in sorted(by_class):
        ordered = sorted(by_class[class_id], key=_det_order_key)
        kept_c = []
        for _, d in ordered:
            if all(bev_iou(d, k) <= iou_thresh for k in kept_c):
                kept_c.append(d)
        kept.extend(kept_c)
    return kept


def average_precision(dets, gts, iou_thresh):
    """AP of one class: score-descending greedy matching, 101-point interpolation.

    ``dets`` are (scene_id, Detection) pairs pooled over a corpus; ``gts`` are
    (scene_id, box) pairs of the same class.  Returns None when no GT exists.
    """
    n_gt = len(gts)
    if n_gt == 0:
        return None
    ordered = sorted(enumerate(d for _, d in dets), key=_det_order_key)
    scenes = [s for s, _ in dets]
    matched = [False] * n_gt
    tp = []
    fp = []
    for seq, det in ordered:
        best_iou = 0.0
        best_j = -1
        for j, (gt_scene, gt) in enumerate(gts):
            if matched[j] or gt_scene != scenes[seq]:
                continue
            iou = bev_iou(det, gt)
            if iou >= iou_thresh and iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0:
            matched[best_j] = True
            tp.append(1.0)
            fp.append(0.0)
        else:
            tp.append(0.0)
            fp.append(1.0)
    if not tp:
        return 0.0
    tp = np.cumsum(tp)
    fp = np.cumsum(fp)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def mean_average_precision(dets, gts, num_classes, iou_thresholds=None):
    """Per-class AP dict plus mean over classes that have ground truth."""
    iou_thresholds = iou_thresholds or DEFAULT_AP_IOU
    per_class = {}
    notes = []
    for c in range(num_classes):
        c_dets = [(s, d) for s, d in dets if d.class_id == c]
        c_gts = [(s, g) for s, g in gts if g.class_id == c]
        ap = average_precision(c_dets, c_gts, iou_thresholds.get(c, 0.5))
        per_class[c] = ap
        if ap is None:
            notes.append(f"class {c}: no ground truth, excluded from mean")
    defined = [ap for ap in per_class.values() if ap is not None]
    mean = float(np.mean(defined)) if defined else 0.0
    return {"per_class": per_class, "mean": mean, "notes": notes}
