"""Layer modules, parameter trees and bit-exact JSON checkpoints."""

from __future__ import annotations

import json
import math
import os

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor

CHECKPOINT_VERSION = 1


class Module:
    """Tree of layers; children are discovered from attributes in order."""

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(sub)

    def own_parameters(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def named_parameters(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for p_name, p in mod.own_parameters():
                yield (f"{mod_name}.{p_name}" if mod_name else p_name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for b_name, b in getattr(mod, "_buffers", lambda: [])():
                yield (f"{mod_name}.{b_name}" if mod_name else b_name), b

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Detach all parameters from future graphs (frozen-teacher contract)."""
        for p in self.parameters():
            p.requires_grad = False
            p._parents = ()
            p._backward = None
        return self

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(list):
    """Plain list of modules that participates in attribute discovery."""


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias_init=0.0):
        if in_channels < 1 or out_channels < 1:
            raise ConfigurationError("conv channels must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        bound = math.sqrt(6.0 / fan_in)  # Kaiming uniform, fan-in, ReLU gain
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size)),
            requires_grad=True,
        )
        self.bias = Tensor(np.full(out_channels, bias_init, dtype=np.float64), requires_grad=True)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=np.float64), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float64), requires_grad=True)
        self.state = T.BatchNormState(channels, momentum=momentum, eps=eps)

    def _buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.state, self.training)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Sequential(Module):
    def __init__(self, *mods):
        self.mods = ModuleList(mods)

    def forward(self, x):
        for m in self.mods:
            x = m(x)
        return x


def state_dict(module):
    """Name -> array for every parameter and buffer, copies included."""
    state = {name: p.data.copy() for name, p in module.named_parameters()}
    for name, b in module.named_buffers():
        state[name] = b.copy()
    return state


def load_state_dict(module, state, strict=True):
    params = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    missing = (set(params) | set(buffers)) - set(state)
    extra = set(state) - (set(params) | set(buffers))
    if strict and (missing or extra):
        raise ConfigurationError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in state.items():
        target = params.get(name)
        if target is not None:
            if target.data.shape != arr.shape:
                raise ConfigurationError(f"shape mismatch for {name}: {target.data.shape} vs {arr.shape}")
            target.data[...] = arr
            continue
        buf = buffers.get(name)
        if buf is not None:
            if buf.shape != arr.shape:
                raise ConfigurationError(f"shape mismatch for buffer {name}")
            buf[...] = arr


def save_checkpoint(module, path):
    """Write a versioned JSON checkpoint that round-trips bit-exactly."""
    doc = {"version": CHECKPOINT_VERSION, "tensors": {}}
    for name, arr in state_dict(module).items():
        doc["tensors"][name] = {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')!r}")
    state = {}
    for name, entry in doc["tensors"].items():
        state[name] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return state


def load_checkpoint(module, path):
    load_state_dict(module, read_checkpoint(path))
    return module
