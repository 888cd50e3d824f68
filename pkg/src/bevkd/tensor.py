"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy float64 array wrapped in a :class:`Tensor`.  Forward
operations record their inputs and a backward closure; ``Tensor.backward()``
on a scalar loss walks the recorded graph in reverse topological order and
accumulates gradients on every ``requires_grad`` leaf.

The set of differentiable primitives is deliberately small (see ``OP_NAMES``);
everything else in the code base is composed from them.  All primitives are
covered by a central finite-difference gradient suite in the tests.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from functools import lru_cache

import numpy as np


class ConfigurationError(ValueError):
    """Raised for structurally invalid inputs (shape/parameter mismatches)."""


class UsageError(RuntimeError):
    """Raised when the autodiff API is called outside its contract."""


# Names of all registered differentiable primitives.  The gradient test suite
# asserts it covers exactly this set, so extending the engine without a
# finite-difference check fails loudly.
OP_NAMES = frozenset(
    {
        "add",
        "sub",
        "mul",
        "div",
        "neg",
        "pow",
        "exp",
        "log",
        "sqrt",
        "abs",
        "sigmoid",
        "relu",
        "reshape",
        "sum",
        "conv2d",
        "bilinear_resize",
        "batch_norm",
        "roi_align",
    }
)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen-teacher forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.op = _op

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    # -- gradient machinery -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar; leaf gradients accumulate additively."""
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in _norm_axes(axis, self.ndim)])
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, out, op, da, db):
    a_req, b_req = a.requires_grad, b.requires_grad
    if not (a_req or b_req) or not _grad_enabled:
        return Tensor(out, _op=op)

    def backward(g):
        if a_req:
            a._accumulate(_unbroadcast(da(g), a.data.shape))
        if b_req:
            b._accumulate(_unbroadcast(db(g), b.data.shape))

    return Tensor(out, requires_grad=True, _parents=(a, b), _backward=backward, _op=op)


def _unary(a, out, op, da):
    if not a.requires_grad or not _grad_enabled:
        return Tensor(out, _op=op)

    def backward(g):
        a._accumulate(da(g))

    return Tensor(out, requires_grad=True, _parents=(a,), _backward=backward, _op=op)


# -- elementwise primitives ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data + b.data, "add", lambda g: g, lambda g: g)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data - b.data, "sub", lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, a.data * b.data, "mul", lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(
        a,
        b,
        a.data / b.data,
        "div",
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def neg(a):
    a = as_tensor(a)
    return _unary(a, -a.data, "neg", lambda g: -g)


def power(a, exponent):
    """Elementwise power with a constant (non-tensor) exponent."""
    a = as_tensor(a)
    c = float(exponent)
    out = a.data ** c
    return _unary(a, out, "pow", lambda g: g * c * a.data ** (c - 1.0))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, "exp", lambda g: g * out)


def log(a):
    a = as_tensor(a)
    return _unary(a, np.log(a.data), "log", lambda g: g / a.data)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary(a, out, "sqrt", lambda g: g * 0.5 / out)


def absolute(a):
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), "abs", lambda g: g * np.sign(a.data))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _unary(a, out, "sigmoid", lambda g: g * out * (1.0 - out))


def relu(a):
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), "relu", lambda g: g * (a.data > 0))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _unary(a, a.data.reshape(shape), "reshape", lambda g: g.reshape(old))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, _norm_axes(axis, a.data.ndim))
        return np.broadcast_to(gg, a.data.shape).copy()

    return _unary(a, out, "sum", da)


# -- convolution --------------------------------------------------------------


def _conv_out_side(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    """Flat [Cin*kh*kw, N*Ho*Wo] patch matrix (single-GEMM layout)."""
    n, c = xp.shape[:2]
    col = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    xpt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xpt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return col.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] plus bias."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError("conv2d expects 4-d input and weight")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ConfigurationError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if bias.shape != (cout,):
        raise ConfigurationError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if stride < 1:
        raise ConfigurationError("conv2d stride must be >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError("conv2d kernel larger than padded input")
    ho, wo = _conv_out_side(h, kh, stride, padding), _conv_out_side(w, kw, stride, padding)

    pointwise = kh == kw == 1 and stride == 1 and padding == 0

    def make_col():
        if pointwise:
            return np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, n * h * w)
        if padding:
            xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
            xp[:, :, padding : padding + h, padding : padding + w] = x.data
        else:
            xp = x.data
        return _im2col(xp, kh, kw, stride, ho, wo)

    w_mat = weight.data.reshape(cout, cin * kh * kw)
    col = make_col()
    out = (w_mat @ col).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3) + bias.data.reshape(1, cout, 1, 1)

    needs = (x.requires_grad or weight.requires_grad or bias.requires_grad) and _grad_enabled
    if not needs:
        return Tensor(out, _op="conv2d")
    saved = [col if weight.requires_grad else None]

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        if bias.requires_grad:
            bias._accumulate(g_mat.sum(axis=1))
        if weight.requires_grad:
            col_b = saved[0] if saved[0] is not None else make_col()
            saved[0] = None  # free the buffer once consumed
            weight._accumulate((g_mat @ col_b.T).reshape(cout, cin, kh, kw))
        if x.requires_grad:
            gcol = (w_mat.T @ g_mat).reshape(cin, kh, kw, n, ho, wo)
            if pointwise:
                x._accumulate(gcol.reshape(cin, n, h, w).transpose(1, 0, 2, 3))
            else:
                gxpt = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=np.float64)
                for i in range(kh):
                    for j in range(kw):
                        gxpt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcol[:, i, j]
                if padding:
                    gxpt = gxpt[:, :, padding : padding + h, padding : padding + w]
                x._accumulate(gxpt.transpose(1, 0, 2, 3))

    return Tensor(out, requires_grad=True, _parents=(x, weight, bias), _backward=backward, _op="conv2d")


# -- bilinear resize ----------------------------------------------------------


@lru_cache(maxsize=256)
def _resize_matrix(n_in, n_out):
    """Row-interpolation matrix for align-corners-false bilinear resizing."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def bilinear_resize(x, out_hw):
    """Resize [N,C,H,W] to [N,C,H',W'] with the align-corners-false convention."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ConfigurationError("bilinear_resize expects a 4-d tensor")
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh <= 0 or ow <= 0:
        raise ConfigurationError(f"bilinear_resize target must be positive, got {(oh, ow)}")
    n, c, h, w = x.shape
    a = _resize_matrix(h, oh)
    b = _resize_matrix(w, ow)
    tmp = np.einsum("oh,nchw->ncow", a, x.data, optimize=True)
    out = np.einsum("pw,ncow->ncop", b, tmp, optimize=True)

    def backward_fn(g):
        tmp_g = np.einsum("pw,ncop->ncow", b, g, optimize=True)
        return np.einsum("oh,ncow->nchw", a, tmp_g, optimize=True)

    return _unary(x, out, "bilinear_resize", backward_fn)


# -- batch normalization -------------------------------------------------------


class BatchNormState:
    """Running statistics for a batch-norm layer (plain buffers, no grads)."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state, training):
    """Per-channel normalization over (N,H,W); batch stats while training."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError("batch_norm scale/shift must match channel count")
    gm = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gm * xhat + bt

    needs = (x.requires_grad or gamma.requires_grad or beta.requires_grad) and _grad_enabled
    if not needs:
        return Tensor(out, _op="batch_norm")

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gm
            ivs = inv_std.reshape(1, c, 1, 1)
            if training:
                m = n * h * w
                xc = x.data - mu.reshape(1, c, 1, 1)
                dvar = (gxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv_std**3
                dmu = -(gxhat * ivs).sum(axis=(0, 2, 3)) + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3))
                gx = gxhat * ivs + dvar.reshape(1, c, 1, 1) * 2.0 * xc / m + dmu.reshape(1, c, 1, 1) / m
            else:
                gx = gxhat * ivs
            x._accumulate(gx)

    return Tensor(out, requires_grad=True, _parents=(x, gamma, beta), _backward=backward, _op="batch_norm")


# -- RoI align ----------------------------------------------------------------


def _roi_sampling_points(rois, out_size, samples):
    """Continuous sample coordinates per RoI: [n, out*out*samples^2] each axis."""
    n = rois.shape[0]
    offs = (np.arange(samples) + 0.5) / samples
    bins = np.arange(out_size)
    # fraction of the box covered by each sample point, flattened bin-major
    frac = (bins[:, None] + offs[None, :]).reshape(-1) / out_size  # [out*samples]
    x0, y0, x1, y1 = rois[:, 0], rois[:, 1], rois[:, 2], rois[:, 3]
    sx = x0[:, None] + frac[None, :] * (x1 - x0)[:, None]  # [n, out*samples]
    sy = y0[:, None] + frac[None, :] * (y1 - y0)[:, None]
    # cross product -> [n, out*samples (y), out*samples (x)]
    sx = np.broadcast_to(sx[:, None, :], (n, out_size * samples, out_size * samples))
    sy = np.broadcast_to(sy[:, :, None], (n, out_size * samples, out_size * samples))
    return sx.reshape(n, -1), sy.reshape(n, -1)


def roi_align(feat, rois, batch_index, out_size=7, samples=2):
    """Bilinearly crop [n_rois, C, out, out] windows from a [N,C,H,W] map.

    ``rois`` are (x0, y0, x1, y1) in grid-cell units; values at integer+0.5
    coordinates coincide with cell centers, borders replicate.
    """
    feat = as_tensor(feat)
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    batch_index = np.asarray(batch_index, dtype=np.int64).reshape(-1)
    n_rois = rois.shape[0]
    n, c, h, w = feat.shape
    if n_rois == 0:
        return Tensor(np.zeros((0, c, out_size, out_size)), _op="roi_align")

    sx, sy = _roi_sampling_points(rois, out_size, samples)  # [n_rois, P]
    ux = np.clip(sx - 0.5, 0.0, w - 1.0)
    uy = np.clip(sy - 0.5, 0.0, h - 1.0)
    x0 = np.floor(ux).astype(np.int64)
    y0 = np.floor(uy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = ux - x0
    fy = uy - y0
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    flat = feat.data.reshape(n, c, h * w)
    bi = batch_index[:, None]
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    # gather -> [n_rois, C, P]
    vals = (
        flat[bi, :, i00].transpose(0, 2, 1) * w00[:, None, :]
        + flat[bi, :, i01].transpose(0, 2, 1) * w01[:, None, :]
        + flat[bi, :, i10].transpose(0, 2, 1) * w10[:, None, :]
        + flat[bi, :, i11].transpose(0, 2, 1) * w11[:, None, :]
    )
    p_side = out_size * samples
    vals = vals.reshape(n_rois, c, p_side, p_side)
    # average the samples^2 points inside each bin
    out = vals.reshape(n_rois, c, out_size, samples, out_size, samples).mean(axis=(3, 5))

    if not feat.requires_grad or not _grad_enabled:
        return Tensor(out, _op="roi_align")

    def backward(g):
        gp = np.repeat(np.repeat(g, samples, axis=2), samples, axis=3) / (samples * samples)
        gp = gp.reshape(n_rois, c, -1)  # [n_rois, C, P]
        gflat = np.zeros((n, c, h * w), dtype=np.float64)
        ar_c = np.arange(c)[None, :, None]
        for idx, wgt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
            np.add.at(gflat, (bi[:, :, None], ar_c, idx[:, None, :]), gp * wgt[:, None, :])
        feat._accumulate(gflat.reshape(n, c, h, w))

    return Tensor(out, requires_grad=True, _parents=(feat,), _backward=backward, _op="roi_align")
