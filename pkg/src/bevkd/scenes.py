"""Synthetic BEV scenes, pillar rasterization and center-heatmap targets.

Scenes live on a square ``[0, extent) x [0, extent)`` meter patch.  Boxes are
axis-aligned (no yaw); two default classes mirror the large/small object scale
gap: "large" boxes of several meters and sub-meter "small" boxes.  Everything
is a pure function of ``(seed, config)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigurationError, Tensor

SCENE_SCHEMA_VERSION = 1

# divisor applied to per-pillar point counts to build feature 0
COUNT_NORM = 20.0


@dataclass
class ClassSpec:
    """Box distribution of one object class."""

    name: str
    count_range: tuple[int, int]  # inclusive, boxes per scene
    size_range: tuple[float, float]  # meters, each of w/l drawn uniformly
    point_density: float  # points per square meter
    min_points: int
    intensity_mean: float
    intensity_std: float


@dataclass
class SceneConfig:
    extent: float = 60.0
    classes: tuple[ClassSpec, ...] = (
        ClassSpec("large", (2, 4), (8.0, 12.0), 1.2, 24, 0.75, 0.08),
        ClassSpec("small", (3, 6), (0.6, 1.2), 10.0, 6, 0.35, 0.08),
    )
    clutter_rate: float = 0.05  # uniform background points per square meter
    min_separation: float = 1.0  # extra meters between box bounding circles

    @property
    def num_classes(self):
        return len(self.classes)


@dataclass
class BoxLabel:
    cx: float
    cy: float
    w: float
    l: float
    class_id: int


@dataclass
class Scene:
    points: np.ndarray  # [n, 3] of (x, y, intensity)
    boxes: list[BoxLabel]
    extent: float
    seed: int


@dataclass
class PillarGrid:
    voxel_size: float
    extent: float
    grid: Tensor  # [1, 4, G, G]
    raw_counts: np.ndarray  # [G, G] integer point counts, pre-normalization

    @property
    def side(self):
        return self.grid.shape[-1]


@dataclass
class TargetMaps:
    heatmap: Tensor  # [1, C, G', G'] in [0, 1]
    reg: Tensor  # [1, 4, G', G'] of (dx, dy, log w, log l)
    reg_mask: Tensor  # [1, 1, G', G'] in {0, 1}
    num_peaks: int  # boxes stamped into the heatmap
    num_reg: int  # cells carrying regression targets
    rejected: int = 0


def _place_boxes(rng, config):
    boxes = []
    for class_id, spec in enumerate(config.classes):
        lo, hi = spec.size_range
        if hi >= config.extent:
            raise ConfigurationError(
                f"class {spec.name!r} boxes (up to {hi} m) do not fit the {config.extent} m extent"
            )
        count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
        for _ in range(count):
            for _attempt in range(1000):
                w = float(rng.uniform(lo, hi))
                l = float(rng.uniform(lo, hi))
                cx = float(rng.uniform(w / 2, config.extent - w / 2))
                cy = float(rng.uniform(l / 2, config.extent - l / 2))
                r_new = max(w, l) / 2
                ok = all(
                    math.hypot(cx - b.cx, cy - b.cy)
                    >= r_new + max(b.w, b.l) / 2 + config.min_separation
                    for b in boxes
                )
                if ok:
                    boxes.append(BoxLabel(cx, cy, w, l, class_id))
                    break
            else:
                raise ConfigurationError(
                    f"could not place a {spec.name!r} box after 1000 attempts; config too dense"
                )
    return boxes


def generate_scene(seed, config=None):
    """Deterministically sample a scene: boxes, in-box points and clutter."""
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    boxes = _place_boxes(rng, config)

    chunks = []
    for box in boxes:
        spec = config.classes[box.class_id]
        n = max(spec.min_points, int(round(spec.point_density * box.w * box.l)))
        xs = rng.uniform(box.cx - box.w / 2, box.cx + box.w / 2, size=n)
        ys = rng.uniform(box.cy - box.l / 2, box.cy + box.l / 2, size=n)
        inten = np.clip(rng.normal(spec.intensity_mean, spec.intensity_std, size=n), 0.0, 1.0)
        chunks.append(np.column_stack([xs, ys, inten]))

    n_clutter = int(round(config.clutter_rate * config.extent**2))
    if n_clutter:
        xs = rng.uniform(0.0, config.extent, size=n_clutter)
        ys = rng.uniform(0.0, config.extent, size=n_clutter)
        inten = rng.uniform(0.0, 1.0, size=n_clutter)
        chunks.append(np.column_stack([xs, ys, inten]))

    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    # guard the half-open extent invariant against boundary draws
    points[:, :2] = np.clip(points[:, :2], 0.0, np.nextafter(config.extent, 0.0))
    return Scene(points=points, boxes=boxes, extent=config.extent, seed=seed)


def make_corpus(n_scenes, base_seed, config=None):
    return [generate_scene(base_seed + i, config) for i in range(n_scenes)]


# -- serialization --------------------------------------------------------------


def scene_to_json(scene):
    doc = {
        "version": SCENE_SCHEMA_VERSION,
        "seed": scene.seed,
        "extent": scene.extent,
        "points": [[float(x), float(y), float(i)] for x, y, i in scene.points],
        "boxes": [
            {"cx": b.cx, "cy": b.cy, "w": b.w, "l": b.l, "class_id": b.class_id}
            for b in scene.boxes
        ],
    }
    return json.dumps(doc, sort_keys=True)


def scene_from_json(text):
    doc = json.loads(text)
    if doc.get("version") != SCENE_SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported scene schema version {doc.get('version')!r}")
    points = np.asarray(doc["points"], dtype=np.float64).reshape(-1, 3)
    boxes = [BoxLabel(b["cx"], b["cy"], b["w"], b["l"], int(b["class_id"])) for b in doc["boxes"]]
    return Scene(points=points, boxes=boxes, extent=float(doc["extent"]), seed=int(doc["seed"]))


def save_corpus(scenes, path):
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(scene_to_json(scene) + "\n")


def load_corpus(path):
    with open(path) as fh:
        return [scene_from_json(line) for line in fh if line.strip()]


# -- rasterization ---------------------------------------------------------------


def grid_side(extent, voxel_size):
    side = extent / voxel_size
    if abs(side - round(side)) > 1e-9:
        raise ConfigurationError(
            f"extent {extent} is not divisible by voxel size {voxel_size} (side {side})"
        )
    return int(round(side))


def rasterize(scene, voxel_size):
    """Bin points into pillars; features are (count/norm, mean intensity,
    mean normalized x offset, mean normalized y offset)."""
    g = grid_side(scene.extent, voxel_size)
    counts = np.zeros((g, g), dtype=np.int64)
    feats = np.zeros((1, 4, g, g), dtype=np.float64)
    if len(scene.points):
        xs, ys, inten = scene.points[:, 0], scene.points[:, 1], scene.points[:, 2]
        ix = np.floor(xs / voxel_size).astype(np.int64)
        iy = np.floor(ys / voxel_size).astype(np.int64)
        ix = np.clip(ix, 0, g - 1)
        iy = np.clip(iy, 0, g - 1)
        np.add.at(counts, (iy, ix), 1)
        half = voxel_size / 2.0
        dx = (xs - (ix + 0.5) * voxel_size) / half
        dy = (ys - (iy + 0.5) * voxel_size) / half
        sums = np.zeros((3, g, g), dtype=np.float64)
        np.add.at(sums[0], (iy, ix), inten)
        np.add.at(sums[1], (iy, ix), dx)
        np.add.at(sums[2], (iy, ix), dy)
        occupied = counts > 0
        feats[0, 0] = counts / COUNT_NORM
        for f in range(3):
            feats[0, 1 + f][occupied] = sums[f][occupied] / counts[occupied]
    return PillarGrid(voxel_size=voxel_size, extent=scene.extent, grid=Tensor(feats), raw_counts=counts)


# -- target assignment -------------------------------------------------------------


def gaussian_radius_cells(w, l, voxel_size_out):
    """Radius rule: half the smaller box side in output cells, floor of 2."""
    return max(2, int(math.floor(0.5 * min(w, l) / voxel_size_out + 0.5)))


def assign_targets(boxes, grid_side_out, voxel_size_out, num_classes, flags=None):
    """CenterPoint-style Gaussian heatmap plus sub-cell offset regression.

    ``flags`` optionally carries per-box ``(use_for_cls, use_for_reg)`` pairs
    (the label-KD merged-set contract); by default every box does both.
    """
    g = grid_side_out
    heatmap = np.zeros((1, num_classes, g, g), dtype=np.float64)
    reg = np.zeros((1, 4, g, g), dtype=np.float64)
    reg_mask = np.zeros((1, 1, g, g), dtype=np.float64)
    if flags is None:
        flags = [(True, True)] * len(boxes)

    peaks = []
    rejected = 0
    for box, (use_cls, use_reg) in zip(boxes, flags):
        ix = int(math.floor(box.cx / voxel_size_out))
        iy = int(math.floor(box.cy / voxel_size_out))
        if not (0 <= ix < g and 0 <= iy < g):
            rejected += 1
            continue
        if use_cls:
            radius = gaussian_radius_cells(box.w, box.l, voxel_size_out)
            sigma = radius / 3.0
            y0, y1 = max(0, iy - radius), min(g, iy + radius + 1)
            x0, x1 = max(0, ix - radius), min(g, ix + radius + 1)
            yy = np.arange(y0, y1) - iy
            xx = np.arange(x0, x1) - ix
            patch = np.exp(-(yy[:, None] ** 2 + xx[None, :] ** 2) / (2.0 * sigma**2))
            c = box.class_id
            np.maximum(heatmap[0, c, y0:y1, x0:x1], patch, out=heatmap[0, c, y0:y1, x0:x1])
            peaks.append((c, iy, ix))
        if use_reg:
            reg[0, 0, iy, ix] = box.cx / voxel_size_out - (ix + 0.5)
            reg[0, 1, iy, ix] = box.cy / voxel_size_out - (iy + 0.5)
            reg[0, 2, iy, ix] = math.log(box.w)
            reg[0, 3, iy, ix] = math.log(box.l)
            reg_mask[0, 0, iy, ix] = 1.0
    for c, iy, ix in peaks:
        heatmap[0, c, iy, ix] = 1.0

    return TargetMaps(
        heatmap=Tensor(heatmap),
        reg=Tensor(reg),
        reg_mask=Tensor(reg_mask),
        num_peaks=len(peaks),
        num_reg=int(reg_mask.sum()),
        rejected=rejected,
    )


def stack_targets(targets):
    """Concatenate per-scene TargetMaps along the batch axis."""
    return TargetMaps(
        heatmap=Tensor(np.concatenate([t.heatmap.data for t in targets], axis=0)),
        reg=Tensor(np.concatenate([t.reg.data for t in targets], axis=0)),
        reg_mask=Tensor(np.concatenate([t.reg_mask.data for t in targets], axis=0)),
        num_peaks=sum(t.num_peaks for t in targets),
        num_reg=sum(t.num_reg for t in targets),
        rejected=sum(t.rejected for t in targets),
    )
