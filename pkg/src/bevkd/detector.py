"""Micro BEV detector with three module groups (PFE / BFE / head).

Two families share one topology and differ only in the PFE:

* ``pillar-like`` — per-pillar 1x1 conv stack, output side equals input side;
* ``voxel-like`` — two stride-2 3x3 convs, output side is input side / 4
  (stands in for a sparse 3D backbone whose BEV map is coarser than input).

Width multipliers scale the channel count of each group; ``depth_bfe`` scales
the number of residual blocks while the BFE down/upsample path always stays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ConfigurationError, Tensor

FAMILIES = ("pillar-like", "voxel-like")
IN_FEATURES = 4  # rasterizer features per pillar
CLS_BIAS_INIT = math.log(0.1 / 0.9)  # prior detection probability 0.1


@dataclass(frozen=True)
class DetectorConfig:
    family: str = "pillar-like"
    width_pfe: float = 1.0
    width_bfe: float = 1.0
    width_head: float = 1.0
    depth_bfe: float = 1.0
    voxel_size: float = 1.0
    base_channels: int = 32
    base_depth: int = 6
    num_classes: int = 2

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        for name in ("width_pfe", "width_bfe", "width_head", "depth_bfe"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigurationError(f"{name} must be in (0, 1], got {v}")
        if self.voxel_size <= 0:
            raise ConfigurationError("voxel_size must be positive")
        if self.base_channels < 1 or self.base_depth < 1:
            raise ConfigurationError("base_channels and base_depth must be >= 1")
        return self

    @property
    def downsample(self):
        return 1 if self.family == "pillar-like" else 4

    @property
    def voxel_size_out(self):
        return self.voxel_size * self.downsample

    def channels(self):
        return {
            "pfe": _scaled(self.base_channels, self.width_pfe),
            "bfe": _scaled(self.base_channels, self.width_bfe),
            "head": _scaled(self.base_channels, self.width_head),
        }

    @property
    def bfe_blocks(self):
        return max(1, _scaled(self.base_depth, self.depth_bfe))

    def scaled(self, **kwargs):
        return replace(self, **kwargs)


def _scaled(base, mult):
    return max(1, int(math.floor(base * mult + 0.5)))


@dataclass
class DetectorOutput:
    p_cls: Tensor  # [N, C, G', G'] after sigmoid
    p_reg: Tensor  # [N, 4, G', G']
    bfe_feature: Tensor  # [N, Cb, G', G']

    @property
    def side(self):
        return self.p_cls.shape[-1]


class Pfe(nn.Module):
    def __init__(self, cfg, rng):
        c = cfg.channels()["pfe"]
        if cfg.family == "pillar-like":
            self.conv1 = nn.Conv2d(IN_FEATURES, c, 1, rng)
            self.conv2 = nn.Conv2d(c, c, 1, rng)
        else:
            self.conv1 = nn.Conv2d(IN_FEATURES, c, 3, rng, stride=2, padding=1)
            self.conv2 = nn.Conv2d(c, c, 3, rng, stride=2, padding=1)
        self.bn1 = nn.BatchNorm2d(c)
        self.bn2 = nn.BatchNorm2d(c)

    def forward(self, x):
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))


class ResidualBlock(nn.Module):
    def __init__(self, c, rng):
        self.conv1 = nn.Conv2d(c, c, 3, rng, padding=1)
        self.bn1 = nn.BatchNorm2d(c)
        self.conv2 = nn.Conv2d(c, c, 3, rng, padding=1)
        self.bn2 = nn.BatchNorm2d(c)

    def forward(self, x):
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return T.relu(h + x)


class Bfe(nn.Module):
    def __init__(self, cfg, rng):
        c_in = cfg.channels()["pfe"]
        c = cfg.channels()["bfe"]
        self.stem_conv = nn.Conv2d(c_in, c, 3, rng, padding=1)
        self.stem_bn = nn.BatchNorm2d(c)
        self.down_conv = nn.Conv2d(c, c, 3, rng, stride=2, padding=1)
        self.down_bn = nn.BatchNorm2d(c)
        self.blocks = nn.ModuleList(ResidualBlock(c, rng) for _ in range(cfg.bfe_blocks))
        self.fuse_conv = nn.Conv2d(c, c, 3, rng, padding=1)
        self.fuse_bn = nn.BatchNorm2d(c)

    def forward(self, x):
        stem = T.relu(self.stem_bn(self.stem_conv(x)))
        h = T.relu(self.down_bn(self.down_conv(stem)))
        for block in self.blocks:
            h = block(h)
        up = T.bilinear_resize(h, stem.shape[-2:])
        return T.relu(self.fuse_bn(self.fuse_conv(stem + up)))


class Head(nn.Module):
    def __init__(self, cfg, rng):
        c_in = cfg.channels()["bfe"]
        c = cfg.channels()["head"]
        self.cls_conv = nn.Conv2d(c_in, c, 3, rng, padding=1)
        self.cls_bn = nn.BatchNorm2d(c)
        self.cls_out = nn.Conv2d(c, cfg.num_classes, 1, rng, bias_init=CLS_BIAS_INIT)
        self.reg_conv = nn.Conv2d(c_in, c, 3, rng, padding=1)
        self.reg_bn = nn.BatchNorm2d(c)
        self.reg_out = nn.Conv2d(c, 4, 1, rng)

    def forward(self, feat):
        cls_logits = self.cls_out(T.relu(self.cls_bn(self.cls_conv(feat))))
        reg = self.reg_out(T.relu(self.reg_bn(self.reg_conv(feat))))
        return T.sigmoid(cls_logits), reg


class Detector(nn.Module):
    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        self.pfe = Pfe(cfg, rng)
        self.bfe = Bfe(cfg, rng)
        self.head = Head(cfg, rng)

    def forward(self, grid):
        """Run on a PillarGrid (voxel size checked) or a raw [N,4,G,G] tensor."""
        if hasattr(grid, "grid"):
            if abs(grid.voxel_size - self.cfg.voxel_size) > 1e-9:
                raise ConfigurationError(
                    f"grid voxel size {grid.voxel_size} does not match config {self.cfg.voxel_size}"
                )
            x = grid.grid
        else:
            x = grid
        side = x.shape[-1]
        if side % self.cfg.downsample:
            raise ConfigurationError(
                f"grid side {side} not divisible by the {self.cfg.family} downsample factor"
            )
        feat = self.bfe(self.pfe(x))
        p_cls, p_reg = self.head(feat)
        return DetectorOutput(p_cls=p_cls, p_reg=p_reg, bfe_feature=feat)

    def output_side(self, input_side):
        return input_side // self.cfg.downsample

    # -- static structure views (efficiency counters, TGI remap) ----------------

    def conv_layers(self):
        return [(name, m) for name, m in self.named_modules() if isinstance(m, nn.Conv2d)]

    def conv_bn(self):
        """Conv layer name -> name of the BatchNorm2d applied to its output."""
        n_blocks = len(self.bfe.blocks)
        pairs = {
            "pfe.conv1": "pfe.bn1",
            "pfe.conv2": "pfe.bn2",
            "bfe.stem_conv": "bfe.stem_bn",
            "bfe.down_conv": "bfe.down_bn",
            "bfe.fuse_conv": "bfe.fuse_bn",
            "head.cls_conv": "head.cls_bn",
            "head.reg_conv": "head.reg_bn",
        }
        for i in range(n_blocks):
            pairs[f"bfe.blocks.{i}.conv1"] = f"bfe.blocks.{i}.bn1"
            pairs[f"bfe.blocks.{i}.conv2"] = f"bfe.blocks.{i}.bn2"
        return pairs

    def conv_producers(self):
        """Conv layer name -> conv feeding its input (None for the first).

        Residual adds and the stem/up fusion are collapsed onto the straight
        chain; indicator-driven remaps are knowingly inconsistent at skips.
        """
        chain = ["pfe.conv1", "pfe.conv2", "bfe.stem_conv", "bfe.down_conv"]
        for i in range(len(self.bfe.blocks)):
            chain += [f"bfe.blocks.{i}.conv1", f"bfe.blocks.{i}.conv2"]
        chain.append("bfe.fuse_conv")
        producers = {name: (chain[i - 1] if i else None) for i, name in enumerate(chain)}
        for branch in ("cls", "reg"):
            producers[f"head.{branch}_conv"] = "bfe.fuse_conv"
            producers[f"head.{branch}_out"] = f"head.{branch}_conv"
        return producers

    def plan(self, input_side, batch=1):
        """Analytic per-layer records for a given input side, grouped by module.

        Returns (group, kind, record) tuples where conv records carry
        (cin, cout, k, out_side) and bn records carry (channels,).
        """
        if input_side % self.cfg.downsample:
            raise ConfigurationError(
                f"input side {input_side} not divisible by downsample {self.cfg.downsample}"
            )
        records = []

        def conv(group, mod, side):
            out = (side + 2 * mod.padding - mod.kernel_size) // mod.stride + 1
            records.append(
                (group, "conv", {"cin": mod.in_channels, "cout": mod.out_channels,
                                 "k": mod.kernel_size, "out_side": out, "batch": batch})
            )
            return out

        def bn(group, mod):
            records.append((group, "bn", {"channels": mod.channels}))

        s = conv("pfe", self.pfe.conv1, input_side)
        bn("pfe", self.pfe.bn1)
        s = conv("pfe", self.pfe.conv2, s)
        bn("pfe", self.pfe.bn2)

        stem = conv("bfe", self.bfe.stem_conv, s)
        bn("bfe", self.bfe.stem_bn)
        h = conv("bfe", self.bfe.down_conv, stem)
        bn("bfe", self.bfe.down_bn)
        for block in self.bfe.blocks:
            h = conv("bfe", block.conv1, h)
            bn("bfe", block.bn1)
            h = conv("bfe", block.conv2, h)
            bn("bfe", block.bn2)
        # bilinear upsample back to stem side: no parameters, no MACs counted
        conv("bfe", self.bfe.fuse_conv, stem)
        bn("bfe", self.bfe.fuse_bn)

        for branch_conv, branch_bn, branch_out in (
            (self.head.cls_conv, self.head.cls_bn, self.head.cls_out),
            (self.head.reg_conv, self.head.reg_bn, self.head.reg_out),
        ):
            b = conv("head", branch_conv, stem)
            bn("head", branch_bn)
            conv("head", branch_out, b)
        return records


def build(cfg, seed=0):
    """Construct a detector with seeded Kaiming-uniform initialization."""
    return Detector(cfg, np.random.default_rng(seed))


# -- detection loss ---------------------------------------------------------------


@dataclass
class LossParts:
    total: Tensor
    cls: Tensor
    reg: Tensor


def detection_loss(output, targets, lam=2.0, eps=1e-12):
    """Penalty-reduced focal loss on the heatmap plus L1 at peak cells.

    Focal form follows CenterNet (alpha=2, beta=4), normalized by the number
    of stamped peaks; the regression term sums |pred - target| over the
    4 channels at each reg-mask cell and averages over cells.
    """
    p = output.p_cls
    y = targets.heatmap.data
    if p.shape != y.shape:
        raise ConfigurationError(f"heatmap shape mismatch: {p.shape} vs {y.shape}")
    pos = (y == 1.0).astype(np.float64)
    neg_w = ((1.0 - y) ** 4) * (1.0 - pos)
    n_pos = max(1, targets.num_peaks)

    pos_term = T.tsum(Tensor(pos) * (1.0 - p) ** 2 * T.log(p + eps))
    neg_term = T.tsum(Tensor(neg_w) * p**2 * T.log(1.0 - p + eps))
    l_cls = -(pos_term + neg_term) * (1.0 / n_pos)

    mask4 = np.broadcast_to(targets.reg_mask.data, output.p_reg.shape)
    n_reg = max(1, targets.num_reg)
    l_reg = T.tsum(Tensor(mask4.copy()) * T.absolute(output.p_reg - targets.reg)) * (1.0 / n_reg)

    total = l_cls + lam * l_reg
    return LossParts(total=total, cls=l_cls, reg=l_reg)
