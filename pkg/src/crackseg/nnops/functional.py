"""Differentiable primitives.

Each op computes its forward result with numpy (or the compiled kernels) and
registers a closure returning one gradient per input. Only the ops the model
actually needs are provided; anything else is composed from these.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import special

from . import kernels
from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "abs",
    "sum", "mean", "reshape", "transpose", "index", "concat", "matmul",
    "clamp", "sigmoid", "relu", "gelu", "softmax",
    "conv2d", "depthwise_conv2d", "batch_norm", "layer_norm",
    "resample2d", "bilinear_upsample", "bilinear_matrix", "adaptive_avg_pool2d",
    "adaptive_pool_matrix", "conv_output_size",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not a_t and not b_t:
        a, b = Tensor(a), Tensor(b)
    return a, b


# ---------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data

    def bw(g):
        return (g * exponent * ad ** (exponent - 1),)

    return make_result(ad**exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient passes through wherever ``lo <= a <= hi``."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    keep = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        keep &= ad >= lo
    if hi is not None:
        keep &= ad <= hi
    return make_result(out, (a,), lambda g: (g * keep,), "clamp")


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bw, "mean")


# --------------------------------------------------------------------- shape
def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    advanced = _is_advanced(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_result(a.data[idx], (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(np.matmul(ad, bd), (a, b), bw, "matmul")


# --------------------------------------------------------------- activations
def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    ad = a.data
    cdf = 0.5 * (1.0 + special.erf(ad * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return make_result(ad * cdf, (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; stable for large-magnitude inputs."""
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


# -------------------------------------------------------------- convolution
def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of ``x`` [B,C,H,W] with ``weight`` [O,C,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got input {x.shape} and weight {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {cin} channels but weight {weight.shape} expects {wcin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty: input {x.shape}, weight {weight.shape}, stride {stride}, padding {padding}")

    xd = x.data
    wm = weight.data.reshape(cout, cin * kh * kw).astype(xd.dtype, copy=False)
    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    if pointwise:
        cols = xd.reshape(bsz, cin, h * w)
    else:
        cols = kernels.im2col(xd, kh, kw, sh, sw, ph, pw)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data.astype(xd.dtype, copy=False)[None, :, None]
    out = out.reshape(bsz, cout, ho, wo)
    if not pointwise:
        del cols  # recomputed in backward; keeps peak memory down

    def bw(g):
        g3 = g.reshape(bsz, cout, ho * wo)
        c = xd.reshape(bsz, cin, h * w) if pointwise else kernels.im2col(xd, kh, kw, sh, sw, ph, pw)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g3, c.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(wm.T, g3)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                gx = kernels.col2im(dcols, bsz, cin, h, w, kh, kw, sh, sw, ph, pw)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, bw, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=1) -> Tensor:
    """Per-channel correlation; ``weight`` is [C,1,kh,kw], stride 1."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d expects input [B,C,H,W] and weight [C,1,kh,kw], got {x.shape} and {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ValueError(f"depthwise_conv2d kernel count {weight.shape[0]} != channel count {x.shape[1]} (input {x.shape})")
    ph, pw = _pair(padding)
    xd = x.data
    k = weight.data[:, 0].astype(xd.dtype, copy=False)
    out = kernels.depthwise_forward(xd, k, ph, pw)
    if bias is not None:
        out += bias.data.astype(xd.dtype, copy=False)[None, :, None, None]

    def bw(g):
        gx, gk = kernels.depthwise_backward(g, xd, k, ph, pw)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grads = (gx if x.requires_grad else None, gk.reshape(weight.shape))
        return grads + (gb,) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, bw, "depthwise_conv2d")


# ------------------------------------------------------------ normalisation
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of ``x`` [B,C,H,W].

    In training mode the running statistics are updated in place (unbiased
    variance, as the common frameworks do).
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    xd = x.data
    axes = (0, 2, 3)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    cshape = (1, -1, 1, 1)
    g_ = gamma.data.astype(xd.dtype, copy=False).reshape(cshape)
    b_ = beta.data.astype(xd.dtype, copy=False).reshape(cshape)
    if training:
        if n <= 1:
            raise ValueError(f"batch_norm in train mode needs more than one value per channel, got input {x.shape}")
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (n / (n - 1))
    else:
        xc = xd - running_mean.astype(xd.dtype).reshape(cshape)
        var = running_var.astype(xd.dtype).reshape(cshape)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    out = xhat * g_ + b_

    def bw(g):
        gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                s1 = gxhat.mean(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = invstd * (gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean / unit variance, then scale and shift."""
    xd = x.data
    axis = axis % xd.ndim
    d = xd.shape[axis]
    pshape = [1] * xd.ndim
    pshape[axis] = d
    g_ = gamma.data.astype(xd.dtype, copy=False).reshape(pshape)
    b_ = beta.data.astype(xd.dtype, copy=False).reshape(pshape)
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    del xc
    out = xhat * g_ + b_
    red = tuple(i for i in range(xd.ndim) if i != axis)

    def bw(g):
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            s1 = gxhat.mean(axis=axis, keepdims=True)
            s2 = (gxhat * xhat).mean(axis=axis, keepdims=True)
            gx = invstd * (gxhat - s1 - xhat * s2)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- resampling
@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation matrix [n_out, n_in], half-pixel (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D adaptive average pooling matrix [n_out, n_in] (floor/ceil bin edges)."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        stop = -((-(i + 1) * n_in) // n_out)
        m[i, start:stop] = 1.0 / (stop - start)
    m.setflags(write=False)
    return m


def resample2d(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    """Separable linear resampling: ``out[b,c] = mh @ x[b,c] @ mw.T``."""
    xd = x.data
    mh = mh.astype(xd.dtype, copy=False)
    mw = mw.astype(xd.dtype, copy=False)
    out = np.matmul(mh, np.matmul(xd, mw.T))

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_result(out, (x,), bw, "resample2d")


def bilinear_upsample(x: Tensor, scale: int = 2) -> Tensor:
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    if scale != 2:
        raise ValueError(f"only scale factor 2 is supported, got {scale}")
    h, w = x.shape[-2:]
    return resample2d(x, bilinear_matrix(h, h * scale), bilinear_matrix(w, w * scale))


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    h, w = x.shape[-2:]
    return resample2d(x, adaptive_pool_matrix(h, out_hw[0]), adaptive_pool_matrix(w, out_hw[1]))
