"""Per-channel L1 norms of the BFE feature map, averaged over a corpus."""

from __future__ import annotations

import numpy as np

from ..scenes import rasterize
from ..tensor import no_grad


def channel_l1_norms(detector, scenes, voxel_size=None):
    """Mean over scenes of the spatial-mean |feature| per BFE channel.

    Scenes are accumulated in seed order, so the result is independent of the
    order in which the corpus is passed in.
    """
    voxel_size = voxel_size if voxel_size is not None else detector.cfg.voxel_size
    was_training = detector.training
    detector.eval()
    total = None
    ordered = sorted(scenes, key=lambda s: s.seed)
    with no_grad():
        for scene in ordered:
            out = detector(rasterize(scene, voxel_size))
            norms = np.abs(out.bfe_feature.data[0]).mean(axis=(1, 2))
            total = norms if total is None else total + norms
    detector.train(was_training)
    if total is None:
        return np.zeros(0)
    return total / len(ordered)


def write_channel_norms_csv(path, norms, label=""):
    with open(path, "w") as fh:
        fh.write("label,channel,l1_norm\n")
        for i, v in enumerate(np.asarray(norms).tolist()):
            fh.write(f"{label},{i},{v!r}\n")
