"""Classification-response masks selecting where logit KD applies."""

from __future__ import annotations

import numpy as np

from ..tensor import ConfigurationError


def make_mask(variant, teacher_p_cls=None, target_heatmap=None, tau_pp=0.3, k=None):
    """Build an [N, C, G, G] mask on the teacher output grid.

    * ``vanilla`` — all ones;
    * ``gid_l`` — 1 where the assigned target heatmap is non-zero;
    * ``pp_confidence`` — 1 where teacher response >= tau_pp;
    * ``pp_rank`` — one-hot at the K largest teacher responses over all class
      channels jointly, ties broken by lowest flat index;
    * ``pp_gaussian`` — the soft Gaussian target heatmap itself.
    """
    if variant == "vanilla":
        ref = teacher_p_cls if teacher_p_cls is not None else target_heatmap
        return np.ones_like(np.asarray(ref, dtype=np.float64))
    if variant == "gid_l":
        return (np.asarray(target_heatmap, dtype=np.float64) > 0.0).astype(np.float64)
    if variant == "pp_gaussian":
        return np.asarray(target_heatmap, dtype=np.float64).copy()
    if variant == "pp_confidence":
        if not 0.0 < tau_pp < 1.0:
            raise ConfigurationError(f"tau_pp must be in (0, 1), got {tau_pp}")
        return (np.asarray(teacher_p_cls, dtype=np.float64) >= tau_pp).astype(np.float64)
    if variant == "pp_rank":
        if k is None or k <= 0:
            raise ConfigurationError(f"rank-PP needs K >= 1, got {k}")
        p = np.asarray(teacher_p_cls, dtype=np.float64)
        mask = np.zeros_like(p)
        for n in range(p.shape[0]):  # K positions per sample, all classes jointly
            flat = p[n].reshape(-1)
            if k >= flat.size:
                mask[n] = 1.0
            else:
                order = np.argsort(-flat, kind="stable")  # stable: lowest flat index wins ties
                mask[n].reshape(-1)[order[:k]] = 1.0
        return mask
    raise ConfigurationError(f"unknown mask variant {variant!r}")
