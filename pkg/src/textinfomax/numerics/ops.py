"""Differentiable operations on :class:`Tensor`.

Every function takes tensors (or array-likes, treated as constants) and
returns a new tensor whose backward closure produces parent gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, unbroadcast


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested from a batch of one."""


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def back(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def back(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    ad, bd = a.data, b.data

    def back(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    ad, bd = a.data, b.data

    def back(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._make(ad / bd, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._make(out, (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# reductions and shape ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return div(sum(a, axis=axes, keepdims=keepdims), float(count))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(a.data[index]), (a,), back, "getitem")


def diagonal(a: Tensor) -> Tensor:
    """Main diagonal of a square matrix."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diagonal needs a square matrix, got {a.shape}")
    n = a.shape[0]

    def back(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return Tensor._make(np.diagonal(a.data).copy(), (a,), back, "diagonal")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    ad = a.data
    peak = np.max(ad, axis=axis, keepdims=True)
    shifted = np.exp(ad - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(total) + peak
    soft = shifted / total

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._make(out if keepdims else np.squeeze(out, axis=axis), (a,), back, "logsumexp")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))), np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    out = out.astype(ad.dtype)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype)
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-ad))
    return Tensor._make(out, (a,), lambda g: (g * sig,), "softplus")


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (ndim >= 2 on both sides)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    with np.errstate(over="ignore", invalid="ignore"):  # overflow surfaces as NumericError
        out = ad @ bd
    return Tensor._make(out, (a, b), back, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    return sum(mul(a, b))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias``; weight is [D_out, D_in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, back, "linear")


# convolution and pooling --------------------------------------------------------

def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [B, C, H', W', kh, kw] strided view
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(gwin: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: add window gradients back into an image."""
    b, c, oh, ow, kh, kw = gwin.shape
    out = np.zeros(shape, dtype=gwin.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gwin[:, :, :, :, i, j]
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # [B, C, kh, kw, oh, ow]; one strided copy per kernel offset
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _col2im(cols: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    b, c, kh, kw, oh, ow = cols.shape
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [B,C,H,W] input with [K,C,kh,kw] filters."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    b, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {wc}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (k,):
        raise DimensionError("conv2d: bias shape mismatch")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    ckk = c * kh * kw
    wmat = weight.data.reshape(k, ckk)
    if kh == 1 and kw == 1 and stride == 1:
        cols = xd.reshape(b, c, oh * ow)
    else:
        cols = _im2col(xd, kh, kw, stride, oh, ow).reshape(b, ckk, oh * ow)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, k, oh, ow)
    padded_shape = xd.shape

    def back(g):
        g3 = g.reshape(b, k, oh * ow)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grads = [None, gw]
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            if kh == 1 and kw == 1 and stride == 1:
                gx = gcols.reshape(padded_shape)
            else:
                gx = _col2im(gcols.reshape(b, c, kh, kw, oh, ow), padded_shape, stride)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            grads[0] = gx
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, back, "conv2d")


def pool_avg(x: Tensor, kh: int, kw: int, stride: int | None = None) -> Tensor:
    """Mean over each ``kh x kw`` window of a [B,C,H,W] tensor."""
    if x.ndim != 4:
        raise DimensionError("pool_avg expects a 4-D tensor")
    stride = stride or kh
    b, c, h, w = x.shape
    if kh > h or kw > w or kh < 1 or kw < 1:
        raise DimensionError(f"pool window {kh}x{kw} does not fit input {h}x{w}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if kh == h and kw == w:
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def back(g):
            return (np.broadcast_to(g / (kh * kw), x.shape).copy(),)
    else:
        win = _windows(x.data, kh, kw, stride)[:, :, :oh, :ow]
        out = win.mean(axis=(4, 5))

        def back(g):
            gwin = np.broadcast_to((g / (kh * kw))[..., None, None], (b, c, oh, ow, kh, kw))
            return (_scatter_windows(gwin, x.shape, stride),)

    return Tensor._make(out, (x,), back, "pool_avg")


# batch normalisation ---------------------------------------------------------

@dataclass
class RunningStats:
    """Exponential moving averages kept by a batch-norm layer.

    Single-writer: only the training step that owns the layer updates it.
    """

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    count: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float64, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    running: Optional[RunningStats] = None,
) -> Tensor:
    """Per-channel normalisation of a [B,C,...] tensor.

    In ``train`` mode batch statistics over every non-channel axis are used and
    ``running`` (if given) is updated in place. ``eval`` mode reads ``running``.
    """
    if x.ndim < 2:
        raise DimensionError("batch_norm expects [B, C, ...]")
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batch_norm: gamma/beta must have one entry per channel")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data

    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch_norm in train mode needs at least 2 samples")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running is not None:
            n = xd.size // c
            m = running.momentum
            running.mean[...] = (1 - m) * running.mean + m * mu
            running.var[...] = (1 - m) * running.var + m * var * n / max(n - 1, 1)
            running.count += 1
    elif mode == "eval":
        if running is None:
            raise ValueError("eval mode needs running statistics")
        mu, var = running.mean.astype(xd.dtype), running.var.astype(xd.dtype)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)
    n = xd.size // c

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd
        if mode == "train":
            gx = (inv.reshape(bshape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), back, "batch_norm")
