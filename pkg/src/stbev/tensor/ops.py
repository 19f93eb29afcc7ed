"""Differentiable kernels.

Spatial ops take ``(..., C, H, W)`` so a leading batch (or frame) axis rides
along for free.  Convolutions are cross-correlations with zero padding.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ConfigError, ShapeError, Tensor, as_tensor, f64, make


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = f64(a) + f64(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = f64(a) - f64(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = f64(a), f64(b)

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)
    return make(ad * bd, (a, b), bw, "mul")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return mul(a, b)


def broadcast_mul(x: Tensor, vec: Tensor) -> Tensor:
    """``out[..., c, h, w] = x[..., c, h, w] * vec[..., c]``."""
    if x.ndim < 3 or vec.shape[-1] != x.shape[-3]:
        raise ShapeError(f"channel mismatch: {x.shape} vs {vec.shape}")
    return mul(x, reshape(vec, vec.shape + (1, 1)))


def _unary(x: Tensor, y: np.ndarray, dy: np.ndarray, op: str) -> Tensor:
    def bw(g):
        return (g * dy,)
    return make(y, (x,), bw, op)


def sigmoid(x: Tensor) -> Tensor:
    xd = f64(x)
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary(x, y, y * (1.0 - y), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(f64(x))
    return _unary(x, y, 1.0 - y * y, "tanh")


def relu(x: Tensor) -> Tensor:
    xd = f64(x)
    return _unary(x, np.maximum(xd, 0.0), (xd > 0).astype(np.float64), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(f64(x))
    return _unary(x, y, y, "exp")


def log(x: Tensor) -> Tensor:
    xd = f64(x)
    if np.any(xd <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _unary(x, np.log(xd), 1.0 / xd, "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    xd = f64(x)
    return _unary(x, np.abs(xd), np.sign(xd), "abs")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    xd = f64(x)
    inside = ((xd >= lo) & (xd <= hi)).astype(np.float64)
    return _unary(x, np.clip(xd, lo, hi), inside, "clamp")


# -- reductions and shape ------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xd = f64(x)
    out = xd.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)
    return make(f64(x).reshape(shape), (x,), bw, "reshape")


def index(x: Tensor, key) -> Tensor:
    """``x[key]`` for basic or integer-array indexing."""
    out = f64(x)[key]
    fancy = isinstance(key, (list, np.ndarray)) or (
        isinstance(key, tuple) and any(isinstance(k, (list, np.ndarray)) for k in key))

    def bw(g):
        gx = np.zeros(x.shape)
        if fancy:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        return (gx,)
    return make(np.array(out), (x,), bw, "index")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([f64(x) for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if x.requires_grad else None for p, x in zip(parts, xs))
    return make(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([f64(x) for x in xs], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) if x.requires_grad else None for i, x in enumerate(xs))
    return make(out, xs, bw, "stack")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack ``(..., C_i, H, W)`` maps along the channel axis, keeping input order."""
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    hw = {x.shape[-2:] for x in xs}
    lead = {x.shape[:-3] for x in xs}
    if len(hw) != 1 or len(lead) != 1:
        raise ShapeError(f"spatial mismatch: {[x.shape for x in xs]}")
    return concat(xs, axis=-3)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = f64(x)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return make(s, (x,), bw, "softmax")


# -- layers --------------------------------------------------------------------

def _windows(x: np.ndarray, k: int, d: int) -> np.ndarray:
    """Zero-padded dilated ``k x k`` neighborhoods, ``(..., C, H, W, k, k)`` (a strided view)."""
    pad = (k - 1) * d // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])
    span = (k - 1) * d + 1
    return sliding_window_view(xp, (span, span), axis=(-2, -1))[..., ::d, ::d]


def _dw_correlate(x: np.ndarray, K: np.ndarray, d: int) -> np.ndarray:
    return np.einsum("...chwij,cij->...chw", _windows(x, K.shape[-1], d), K)


def dw_conv2d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Depthwise cross-correlation, ``kernel`` of shape ``(C, k, k)`` with ``k`` odd.

    Zero padding of ``(k - 1) * dilation / 2`` keeps ``H, W`` unchanged.
    """
    C, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"kernel must be square with odd size, got {kh}x{kw}")
    if dilation < 1:
        raise ConfigError("dilation must be a positive integer")
    if x.ndim < 3 or x.shape[-3] != C:
        raise ShapeError(f"input {x.shape} does not have {C} channels")
    k, d = kh, int(dilation)
    K = f64(kernel)
    out = _dw_correlate(f64(x), K, d)

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            # adjoint of a symmetric-padded correlation: correlate with the flipped kernel
            gx = _dw_correlate(g, K[:, ::-1, ::-1], d)
        if kernel.requires_grad:
            H, W = x.shape[-2:]
            win = _windows(f64(x).reshape(-1, C, H, W), k, d)
            gk = np.einsum("nchw,nchwij->cij", g.reshape(-1, C, H, W), win)
        return gx, gk
    return make(out, (x, kernel), bw, "dw_conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel affine channel map ``(C_out, C) x (..., C, H, W) -> (..., C_out, H, W)``."""
    Co, Ci = weight.shape
    if x.ndim < 3 or x.shape[-3] != Ci or bias.shape != (Co,):
        raise ShapeError(f"conv1x1 shapes incompatible: x {x.shape}, w {weight.shape}, b {bias.shape}")
    H, W = x.shape[-2:]
    xm = f64(x).reshape(x.shape[:-2] + (H * W,))
    Wd = f64(weight)
    out = (Wd @ xm + f64(bias)[:, None]).reshape(x.shape[:-3] + (Co, H, W))

    def bw(g):
        gm = g.reshape(g.shape[:-2] + (H * W,))
        gx = (Wd.T @ gm).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.einsum("nop,ncp->oc", gm.reshape(-1, Co, H * W), xm.reshape(-1, Ci, H * W))
        gb = gm.sum(axis=tuple(range(gm.ndim - 2)) + (gm.ndim - 1,)) if bias.requires_grad else None
        return gx, gw, gb
    return make(out, (x, weight, bias), bw, "conv1x1")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``(..., C, H, W) -> (..., C)``."""
    if x.ndim < 3:
        raise ShapeError("global_avg_pool needs (..., C, H, W)")
    return mean(x, axis=(-2, -1))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` applied over the last axis."""
    Co, Ci = weight.shape
    if x.shape[-1] != Ci or bias.shape != (Co,):
        raise ShapeError(f"fully_connected shapes incompatible: x {x.shape}, w {weight.shape}, b {bias.shape}")
    xd, Wd = f64(x), f64(weight)
    out = xd @ Wd.T + f64(bias)

    def bw(g):
        gx = g @ Wd if x.requires_grad else None
        gw = g.reshape(-1, Co).T @ xd.reshape(-1, Ci) if weight.requires_grad else None
        gb = g.reshape(-1, Co).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb
    return make(out, (x, weight, bias), bw, "fully_connected")


def channel_conv1d(v: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded 1D cross-correlation along the last (channel) axis; odd kernel."""
    k = kernel.shape[0]
    if kernel.ndim != 1 or k % 2 == 0:
        raise ConfigError("channel kernel must be 1D with odd length")
    C = v.shape[-1]
    pad = k // 2
    vp = np.pad(f64(v), [(0, 0)] * (v.ndim - 1) + [(pad, pad)])
    K = f64(kernel)
    out = np.zeros(v.shape)
    for i in range(k):
        out += K[i] * vp[..., i:i + C]

    def bw(g):
        gv = gk = None
        if v.requires_grad:
            gp = np.zeros(vp.shape)
            for i in range(k):
                gp[..., i:i + C] += K[i] * g
            gv = gp[..., pad:pad + C]
        if kernel.requires_grad:
            gk = np.array([(g * vp[..., i:i + C]).sum() for i in range(k)])
        return gv, gk
    return make(out, (v, kernel), bw, "channel_conv1d")


def sparse_warp(x: Tensor, matrix) -> Tensor:
    """Resample ``(B, C, H, W)`` with a fixed sparse ``(B*H*W, B*H*W)`` matrix.

    Row ``b*H*W + p`` of ``matrix`` holds the interpolation weights of output
    cell ``p`` of sample ``b``; the op is linear in ``x``.
    """
    B, C, H, W = x.shape
    if matrix.shape != (B * H * W, B * H * W):
        raise ShapeError(f"warp matrix {matrix.shape} does not match input {x.shape}")
    xm = f64(x).reshape(B, C, H * W).transpose(0, 2, 1).reshape(B * H * W, C)
    out = np.asarray(matrix @ xm).reshape(B, H * W, C).transpose(0, 2, 1).reshape(B, C, H, W)

    def bw(g):
        gm = g.reshape(B, C, H * W).transpose(0, 2, 1).reshape(B * H * W, C)
        gx = np.asarray(matrix.T @ gm).reshape(B, H * W, C).transpose(0, 2, 1).reshape(B, C, H, W)
        return (gx,)
    return make(out, (x,), bw, "sparse_warp")
