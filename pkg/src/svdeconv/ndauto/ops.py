"""Differentiable primitives.

Every function takes Tensors (or array-likes, treated as constants) and
returns a Tensor, recording a vector-Jacobian rule on the active tape.
Feature maps are N x C x H x W unless stated otherwise.
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    """Constants (scalars, plain arrays) take the dtype of the Tensor operand,
    so a Python float does not promote single-precision data to double."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), vjp)


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record(xd * cdf, (x,), vjp)


# ---------------------------------------------------------------- reductions

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape, dt = x.shape, x.dtype
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape, dt, n = x.shape, x.dtype, x.size
    return record(np.asarray(x.data.mean()), (x,),
                  lambda g: (np.broadcast_to(g / n, shape).astype(dt),))


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial dims: N x C x H x W -> N x C x 1 x 1."""
    x = as_tensor(x)
    shape = x.shape
    hw = shape[2] * shape[3]
    return record(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                  lambda g: (np.broadcast_to(g / hw, shape).copy(),))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def crop(x, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of the last two dims."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., top:top + height, left:left + width] = g
        return (full,)

    return record(x.data[..., top:top + height, left:left + width], (x,), vjp)


def split_channels(x, sections: int) -> List[Tensor]:
    """Split along axis 1 into ``sections`` equal parts."""
    x = as_tensor(x)
    c = x.shape[1]
    if c % sections:
        raise ValueError(f"cannot split {c} channels into {sections} equal parts")
    step = c // sections
    outs = []
    for i in range(sections):
        lo, hi = i * step, (i + 1) * step
        shape = x.shape

        def vjp(g, lo=lo, hi=hi, shape=shape):
            full = np.zeros(shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        outs.append(record(x.data[:, lo:hi], (x,), vjp))
    return outs


def concat_channels(xs: Sequence) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record(np.concatenate([t.data for t in xs], axis=1), xs, vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return record(ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------- normalization / resampling

def layer_norm_channels(x, weight, bias, eps: float = 1e-6) -> Tensor:
    """Normalize each pixel's channel vector, then per-channel affine."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w = weight.data.reshape(1, -1, 1, 1)
    b = bias.data.reshape(1, -1, 1, 1)

    def vjp(g):
        gw = (g * xhat).sum(axis=(0, 2, 3)).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = rstd * (gh - gh.mean(axis=1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, gw, gb

    return record(xhat * w + b, (x, weight, bias), vjp)


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return record(out, (x,), vjp)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------- convolution

def _correlate(xd: np.ndarray, k: np.ndarray, groups: int) -> np.ndarray:
    """'Same' zero-padded cross-correlation. xd: N x C x H x W, k: O x C/g x kh x kw."""
    n, c, h, w = xd.shape
    o, cg, kh, kw = k.shape
    if kh == 1 and kw == 1 and groups == 1:
        out = np.matmul(k[:, :, 0, 0], xd.reshape(n, c, h * w))
        return out.reshape(n, o, h, w)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if groups == c and o == c and cg == 1:
        out = np.zeros((n, c, h, w), dtype=np.result_type(xd, k))
        for a in range(kh):
            for b in range(kw):
                out += k[:, 0, a, b].reshape(1, c, 1, 1) * xp[:, :, a:a + h, b:b + w]
        return out
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N C H W kh kw
    if groups == 1:
        return np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    og = o // groups
    outs = [np.tensordot(win[:, gi * cg:(gi + 1) * cg], k[gi * og:(gi + 1) * og],
                         axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            for gi in range(groups)]
    return np.concatenate(outs, axis=1)


def _correlate_weight_grad(xd: np.ndarray, g: np.ndarray, kshape, groups: int) -> np.ndarray:
    n, c, h, w = xd.shape
    o, cg, kh, kw = kshape
    if kh == 1 and kw == 1 and groups == 1:
        gw = np.matmul(g.reshape(n, o, h * w), xd.reshape(n, c, h * w).transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(o, c, 1, 1)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if groups == c and o == c and cg == 1:
        gw = np.empty((c, 1, kh, kw), dtype=np.result_type(xd, g))
        for a in range(kh):
            for b in range(kw):
                gw[:, 0, a, b] = (g * xp[:, :, a:a + h, b:b + w]).sum(axis=(0, 2, 3))
        return gw
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if groups == 1:
        return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    og = o // groups
    return np.concatenate(
        [np.tensordot(g[:, gi * og:(gi + 1) * og], win[:, gi * cg:(gi + 1) * cg],
                      axes=([0, 2, 3], [0, 2, 3])) for gi in range(groups)], axis=0)


def _transpose_kernel(k: np.ndarray, groups: int) -> np.ndarray:
    """Kernel of the adjoint correlation: swap in/out channels within groups, rotate 180."""
    o, cg, kh, kw = k.shape
    og = o // groups
    kt = k.reshape(groups, og, cg, kh, kw).transpose(0, 2, 1, 3, 4).reshape(groups * cg, og, kh, kw)
    return kt[:, :, ::-1, ::-1]


def conv2d_same(x, kernel, bias=None, groups: int = 1) -> Tensor:
    """Zero-padded 'same' 2-D convolution (true convolution, kernel flipped).

    ``x`` is N x C_in x H x W (a 3-D C_in x H x W input is accepted and
    returned without the batch axis); ``kernel`` is C_out x C_in/groups x kh x kw
    with odd kh, kw.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d_same expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if c % groups or o % groups or cg != c // groups:
        raise ValueError(f"kernel expects {cg * groups} input channels in {groups} groups, input has {c}")
    xd = x.data
    kc = kernel.data[:, :, ::-1, ::-1]
    out = _correlate(xd, kc, groups)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)

    def vjp(g):
        gx = _correlate(g, _transpose_kernel(kc, groups), groups) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = _correlate_weight_grad(xd, g, kc.shape, groups)[:, :, ::-1, ::-1]
        res = [gx, gk]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)).reshape(bias.shape) if bias.requires_grad else None)
        return res

    y = record(out, inputs, vjp)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def conv2d_same_transpose(y: np.ndarray, kernel: np.ndarray, groups: int = 1) -> np.ndarray:
    """Adjoint of ``conv2d_same`` w.r.t. its input (the backward rule applied to ``y``)."""
    squeeze = y.ndim == 3
    yd = y[None] if squeeze else y
    kc = np.asarray(kernel)[:, :, ::-1, ::-1]
    out = _correlate(yd, _transpose_kernel(kc, groups), groups)
    return out[0] if squeeze else out
