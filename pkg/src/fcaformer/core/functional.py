"""Primitive kernels with their gradient rules.

Every kernel takes and returns :class:`Tensor`. Kernels that carry arithmetic
cost report it to any active :func:`count_macs` scope: matmul and the
convolutions count multiply-accumulates, layernorm counts 2 per element, and
softmax, log-softmax, GELU and channel_scale count 1 per element. Plain
elementwise add/mul, reshapes and gathers are free.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import NonFiniteError, Tensor, as_tensor, make_node, record_macs

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), backward, "div")


def channel_scale(t: Tensor, s: Tensor) -> Tensor:
    """Multiply every row of ``t[..., d]`` by the same length-d vector ``s``."""
    if s.ndim != 1 or t.shape[-1] != s.shape[0]:
        raise ValueError(f"channel_scale: cannot scale {t.shape} by {s.shape}")
    record_macs("channel_scale", t.size)
    lead = tuple(range(t.ndim - 1))

    def backward(g):
        return g * s.data, (g * t.data).sum(axis=lead)

    return make_node(t.data * s.data, (t, s), backward, "channel_scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    record_macs("gelu", x.size)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_node(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


# -- shape ------------------------------------------------------------------

def reshape(t: Tensor, shape) -> Tensor:
    out = t.data.reshape(shape)

    def backward(g):
        return (g.reshape(t.shape),)

    return make_node(out, (t,), backward, "reshape")


def transpose(t: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(a % t.ndim for a in axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_node(np.ascontiguousarray(np.transpose(t.data, axes)), (t,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ValueError(f"concat: {t.shape} does not match {ref.shape} off axis {axis}")
        if t.dtype != ref.dtype:
            raise TypeError("concat: dtype mismatch")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def getitem(t: Tensor, index) -> Tensor:
    out = np.array(t.data[index], copy=True)

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(out, (t,), backward, "getitem")


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., *idx] = table[..., index[idx]]``: lookup along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    size = table.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError(f"gather index out of range for table of width {size}")
    out = table.data[..., index]
    flat = index.ravel()

    def backward(g):
        lead = table.shape[:-1]
        rows = g.reshape(int(np.prod(lead, dtype=np.int64)), flat.size)
        dt = np.stack([np.bincount(flat, weights=row, minlength=size) for row in rows])
        return (dt.reshape(table.shape).astype(table.dtype, copy=False),)

    return make_node(out, (table,), backward, "gather")


# -- reductions -------------------------------------------------------------

def sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(t.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).copy(),)

    return make_node(np.asarray(out), (t,), backward, "sum")


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = t.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([t.shape[a] for a in axes]))
    out = np.mean(t.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, t.shape).copy(),)

    return make_node(np.asarray(out, dtype=t.dtype), (t,), backward, "mean")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    p, q = a.shape[-2:]
    r = b.shape[-1]
    record_macs("matmul", int(np.prod(batch, dtype=np.int64)) * p * q * r)

    def backward(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return make_node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` with ``w`` stored as [out, in]."""
    y = matmul(x, w.T)
    return y if b is None else add(y, b)


# -- normalisation / activations -------------------------------------------

def softmax_lastdim(t: Tensor) -> Tensor:
    if t.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    if not np.isfinite(t.data).all():
        raise NonFiniteError("non-finite value in input of softmax")
    record_macs("softmax", t.size)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (t,), backward, "softmax")


def log_softmax_lastdim(t: Tensor) -> Tensor:
    record_macs("log_softmax", t.size)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (t,), backward, "log_softmax")


def layernorm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each last-axis vector to zero mean and unit variance, then apply gamma/beta."""
    d = t.shape[-1]
    if d == 0:
        raise ValueError("layernorm over an empty axis")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    record_macs("layernorm", 2 * t.size)
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(t.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    out = (xhat * gamma.data + beta.data).astype(t.dtype, copy=False)
    return make_node(out, (t, gamma, beta), backward, "layernorm")


# -- convolutions -----------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: Tensor, k: int, stride: int, padding: int, op: str) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"{op} expects [B,C,H,W], got {x.shape}")
    if stride <= 0:
        raise ValueError(f"{op}: stride must be positive")
    if padding < 0:
        raise ValueError(f"{op}: padding must be non-negative")
    h, w = x.shape[2:]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"{op}: kernel {k} larger than padded input {h}x{w} (+{padding})")
    return _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_depthwise(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D cross-correlation; ``w`` is [C, k, k]."""
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise ValueError(f"depthwise kernel must be [C,k,k], got {w.shape}")
    k = w.shape[1]
    ho, wo = _check_conv(x, k, stride, padding, "conv2d_depthwise")
    bsz, c = x.shape[:2]
    if w.shape[0] != c:
        raise ValueError(f"conv2d_depthwise: {c} channels but kernel for {w.shape[0]}")
    record_macs("conv2d_depthwise", bsz * c * ho * wo * k * k)
    xp = _pad(x.data, padding)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    out = np.zeros((bsz, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + hspan:stride, j:j + wspan:stride] * w.data[None, :, i, j, None, None]

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                window = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
                dw[:, i, j] = (g * window).sum(axis=(0, 2, 3))
                dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += g * w.data[None, :, i, j, None, None]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return dxp, dw

    return make_node(out, (x, w), backward, "conv2d_depthwise")


def conv2d_pointwise(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution; ``w`` is [C_out, C_in]."""
    if x.ndim != 4 or w.ndim != 2:
        raise ValueError(f"conv2d_pointwise expects [B,C,H,W] and [C',C], got {x.shape}, {w.shape}")
    bsz, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ValueError(f"conv2d_pointwise: input has {c} channels, kernel expects {w.shape[1]}")
    co = w.shape[0]
    record_macs("conv2d_pointwise", bsz * co * c * h * wd)
    xf = x.data.reshape(bsz, c, h * wd)
    out = np.matmul(w.data, xf).reshape(bsz, co, h, wd)

    def backward(g):
        gf = g.reshape(bsz, co, h * wd)
        dx = np.matmul(w.data.T, gf).reshape(x.shape)
        dw = np.matmul(gf, np.swapaxes(xf, 1, 2)).sum(axis=0)
        return dx, dw

    return make_node(out, (x, w), backward, "conv2d_pointwise")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation; ``w`` is [C_out, C_in, k, k]."""
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d kernel must be [C',C,k,k], got {w.shape}")
    k = w.shape[2]
    ho, wo = _check_conv(x, k, stride, padding, "conv2d")
    bsz, c = x.shape[:2]
    co = w.shape[0]
    if w.shape[1] != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {w.shape[1]}")
    record_macs("conv2d", bsz * co * c * k * k * ho * wo)
    xp = _pad(x.data, padding)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    # columns: [B, C*k*k, Ho*Wo]
    cols = np.empty((bsz, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
    cols = cols.reshape(bsz, c * k * k, ho * wo)
    wf = w.data.reshape(co, c * k * k)
    out = np.matmul(wf, cols).reshape(bsz, co, ho, wo)

    def backward(g):
        gf = g.reshape(bsz, co, ho * wo)
        dw = np.matmul(gf, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wf.T, gf).reshape(bsz, c, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, :, i, j]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return dxp, dw

    return make_node(out, (x, w), backward, "conv2d")
