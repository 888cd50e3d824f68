"""Analytic efficiency accounting (params / flops / acts) and the CPR score.

Conventions (stated in report metadata): flops are multiply-accumulate counts
by default (``double_count`` toggles the x2 convention); activations count
the output elements of conv layers only, including both head branches; batch
norm contributes 2*C parameters and no flops or activations.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigurationError, Tensor, no_grad

MODULE_GROUPS = ("pfe", "bfe", "head")


@dataclass
class EfficiencyReport:
    params: int
    flops: int  # MACs unless noted otherwise in metadata
    acts: int
    per_module: dict
    latency_ms: float | None = None
    latency_std_ms: float | None = None
    peak_mem_bytes: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "params": self.params,
            "flops": self.flops,
            "acts": self.acts,
            "per_module": self.per_module,
            "latency_ms": self.latency_ms,
            "latency_std_ms": self.latency_std_ms,
            "peak_mem_bytes": self.peak_mem_bytes,
            "metadata": self.metadata,
        }


def profile(detector, input_side, batch=1, double_count=False):
    """Exact analytic counts for one forward pass at the given input side."""
    per_module = {g: {"params": 0, "flops": 0, "acts": 0} for g in MODULE_GROUPS}
    live = []
    for group, kind, rec in detector.plan(input_side, batch=batch):
        slot = per_module[group]
        if kind == "conv":
            cin, cout, k, out_side = rec["cin"], rec["cout"], rec["k"], rec["out_side"]
            slot["params"] += cout * cin * k * k + cout
            slot["flops"] += batch * cout * cin * k * k * out_side * out_side
            slot["acts"] += batch * cout * out_side * out_side
            live.append(batch * cout * out_side * out_side)
        elif kind == "bn":
            slot["params"] += 2 * rec["channels"]
    factor = 2 if double_count else 1
    totals = {key: sum(per_module[g][key] for g in MODULE_GROUPS) for key in ("params", "flops", "acts")}
    # sequential execution keeps at most two adjacent conv outputs alive
    peak = max((a + b for a, b in zip(live, live[1:])), default=live[0] if live else 0) * 8
    return EfficiencyReport(
        params=totals["params"],
        flops=totals["flops"] * factor,
        acts=totals["acts"],
        per_module={
            g: {**slot, "flops": slot["flops"] * factor} for g, slot in per_module.items()
        },
        peak_mem_bytes=peak,
        metadata={
            "flops_convention": "2*MAC" if double_count else "MAC",
            "acts_convention": "conv outputs only (head included), BN/ReLU excluded",
            "input_side": input_side,
            "batch": batch,
        },
    )


def count_params(detector):
    return profile(detector, _probe_side(detector)).params


def count_flops(detector, input_side, batch=1, double_count=False):
    return profile(detector, input_side, batch=batch, double_count=double_count).flops


def count_acts(detector, input_side, batch=1):
    return profile(detector, input_side, batch=batch).acts


def _probe_side(detector):
    # params are side-independent; any side accepted by the family works
    return 4 * detector.cfg.downsample


# -- CPR ------------------------------------------------------------------------


@dataclass
class CPRInput:
    acts_s: float
    acts_t: float
    maph_s: float
    maph_t: float

    def validate(self):
        if self.acts_t <= 0:
            raise ConfigurationError("teacher activations must be positive")
        if self.maph_t <= 0:
            raise ConfigurationError("teacher accuracy must be positive")
        return self


def cpr(acts_s, acts_t, maph_s, maph_t):
    """Cost Performance Ratio: 0.5*(1 - acts_s/acts_t) + 0.5*(maph_s/maph_t)^3."""
    inp = CPRInput(acts_s, acts_t, maph_s, maph_t).validate()
    return 0.5 * (1.0 - inp.acts_s / inp.acts_t) + 0.5 * (inp.maph_s / inp.maph_t) ** 3


def cpr_report(acts_s, acts_t, maph_s, maph_t):
    """CPR plus range flags; values outside [0, 1] are reported, never clamped."""
    score = cpr(acts_s, acts_t, maph_s, maph_t)
    report = {"cpr": score, "in_range": 0.0 <= score <= 1.0, "warnings": []}
    if acts_s > acts_t:
        report["warnings"].append("student has more activations than teacher (negative cost term)")
    if not report["in_range"]:
        report["warnings"].append(f"CPR {score:.4f} outside [0, 1]")
    for w in report["warnings"]:
        warnings.warn(w, stacklevel=2)
    return report


# -- latency (reference only) -----------------------------------------------------


def measure_latency(detector, input_side, repeats=10, warmup=2, batch=1):
    """Mean/stddev wall-clock of eval-mode forwards; non-normative by design."""
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    was_training = detector.training
    detector.eval()
    x = Tensor(np.zeros((batch, 4, input_side, input_side)))
    times = []
    with no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            detector(x)
            dt = (time.perf_counter() - t0) * 1000.0
            if i >= warmup:
                times.append(dt)
    detector.train(was_training)
    return {
        "latency_ms": float(np.mean(times)),
        "latency_std_ms": float(np.std(times)),
        "repeats": repeats,
        "warmup": warmup,
        "note": "wall clock; requires exclusive machine use; reference only",
    }
