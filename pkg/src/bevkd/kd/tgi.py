"""Teacher-guided initialization: remap trained teacher weights onto a student.

The student must be a width-slice of the teacher topology (identical layer
names, channel counts less than or equal).  Three remap strategies:

* ``fna``  — copy the first v output / u input channels of every layer;
* ``ofa``  — keep the channels with the largest per-channel L1 weight norm;
* ``slim`` — keep the channels with the largest |BN scale|.

Indicator-driven selections propagate along the straight conv chain; they are
knowingly inconsistent across residual skip connections, which is precisely
why they trail the plain first-channels slice.
"""

from __future__ import annotations

import numpy as np

from .. import nn
from ..tensor import ConfigurationError

STRATEGIES = ("fna", "ofa", "slim")


def select_by_l1(weight, v):
    """Indices of the v output channels with the largest L1 norm, ascending."""
    norms = np.abs(weight).sum(axis=tuple(range(1, weight.ndim)))
    order = np.argsort(-norms, kind="stable")  # ties: lowest channel index
    return np.sort(order[:v])


def select_by_bn_scale(gamma, v):
    """Indices of the v channels with the largest |BN scale|, ascending."""
    order = np.argsort(-np.abs(np.asarray(gamma)), kind="stable")
    return np.sort(order[:v])


def _input_select_by_l1(weight, u):
    norms = np.abs(weight).sum(axis=(0, 2, 3))
    order = np.argsort(-norms, kind="stable")
    return np.sort(order[:u])


def tgi_remap(teacher_state, student, strategy):
    """Initialize ``student`` parameters from a teacher state dict, in place.

    Returns a report of copied layers.  Layers without a teacher counterpart
    would stay at fresh init, but a missing counterpart for an expected conv
    or BN is a topology error and is reported as such.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown TGI strategy {strategy!r}; expected one of {STRATEGIES}")

    convs = student.conv_layers()
    producers = student.conv_producers()
    conv_bn = student.conv_bn()
    bn_modules = {name: m for name, m in student.named_modules() if isinstance(m, nn.BatchNorm2d)}

    offending = []
    for name, conv in convs:
        wt = teacher_state.get(f"{name}.weight")
        if wt is None:
            offending.append(f"{name} (missing in teacher)")
            continue
        if wt.shape[2:] != conv.weight.shape[2:]:
            offending.append(f"{name} (kernel {conv.weight.shape[2:]} vs teacher {wt.shape[2:]})")
    if offending:
        raise ConfigurationError("student topology is not a width-slice of the teacher: " + "; ".join(offending))

    out_sel = {}
    copied = []
    for name, conv in convs:
        wt = teacher_state[f"{name}.weight"]
        bt = teacher_state[f"{name}.bias"]
        r, q = wt.shape[:2]
        v, u = conv.out_channels, conv.in_channels
        if v > r or u > q:
            raise ConfigurationError(
                f"{name}: student channels ({v}, {u}) exceed teacher ({r}, {q})"
            )
        if strategy == "fna":
            out_idx = np.arange(v)
            in_idx = np.arange(u)
        else:
            if u == q:
                in_idx = np.arange(q)
            else:
                prod = producers.get(name)
                prev = out_sel.get(prod)
                in_idx = prev if prev is not None and prev.size == u else _input_select_by_l1(wt, u)
            if v == r:
                out_idx = np.arange(r)  # fixed outputs keep their order
            elif strategy == "ofa":
                out_idx = select_by_l1(wt, v)
            else:  # slim
                bn_name = conv_bn.get(name)
                gamma = teacher_state.get(f"{bn_name}.gamma") if bn_name else None
                out_idx = select_by_bn_scale(gamma, v) if gamma is not None else select_by_l1(wt, v)
        out_sel[name] = out_idx

        conv.weight.data[...] = wt[np.ix_(out_idx, in_idx)]
        conv.bias.data[...] = bt[out_idx]
        copied.append(name)

        bn_name = conv_bn.get(name)
        if bn_name:
            bn = bn_modules[bn_name]
            for key in ("gamma", "beta"):
                src = teacher_state.get(f"{bn_name}.{key}")
                if src is None:
                    raise ConfigurationError(f"teacher is missing {bn_name}.{key}")
                getattr(bn, key).data[...] = src[out_idx]
            bn.state.running_mean[...] = teacher_state[f"{bn_name}.running_mean"][out_idx]
            bn.state.running_var[...] = teacher_state[f"{bn_name}.running_var"][out_idx]
            copied.append(bn_name)

    return {"strategy": strategy, "copied_layers": copied}
