"""Differentiable primitives.

Elementwise binary ops broadcast numpy-style but only between operands of
equal rank (or against a Python scalar / 0-d array); adding a unit axis
is always an explicit ``reshape``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from .tensor import SliceGrad, Tensor, make_node


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_rank(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim and b.ndim and a.ndim != b.ndim:
        raise ValueError(f"{op}: rank mismatch {a.shape} vs {b.shape}; reshape explicitly")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _coerce(b, a)
    else:
        a = _coerce(a, b)
    _check_rank(a, b, op)
    return a, b


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype

    def bw(g):
        return (g.astype(src),)

    return make_node(x.data.astype(dtype), (x,), bw, "cast")


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return make_node(x.data**p, (x,), bw, "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return special.expit(z).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1 + x.data * (1 - s)),)

    return make_node(x.data * s, (x,), bw, "silu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype, copy=False)
    return make_node(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    z = x.data
    cdf = 0.5 * (1.0 + special.erf(z * _INV_SQRT2))
    cdf = cdf.astype(z.dtype, copy=False)

    def bw(g):
        pdf = (_INV_SQRT2PI * np.exp(-0.5 * z * z)).astype(z.dtype, copy=False)
        return (g * (cdf + z * pdf),)

    return make_node(z * cdf, (x,), bw, "gelu")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return make_node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_batch(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _reduce_batch(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight^T`` with ``weight`` stored as ``[..., out, in]``."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    wt = np.swapaxes(weight.data, -1, -2)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = _reduce_batch(g @ weight.data, x.shape)
        if weight.requires_grad:
            if weight.ndim == 2:
                gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
            else:
                gw = _reduce_batch(np.swapaxes(g, -1, -2) @ x.data, weight.shape)
        return gx, gw

    return make_node(x.data @ wt, (x, weight), bw, "linear")


def _reduce_batch(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return _unbroadcast(g, shape)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        return (SliceGrad(shape, idx, g),)

    return make_node(x.data[idx], (x,), bw, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; backward scatter-adds."""
    indices = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    axis = axis % x.ndim

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        _scatter_add_into(out, indices, g, axis)
        return (out,)

    return make_node(np.take(x.data, indices, axis=axis), (x,), bw, "take")


def _scatter_add_into(out: np.ndarray, indices: np.ndarray, src: np.ndarray, axis: int) -> None:
    dst = np.moveaxis(out, axis, 0)
    s = np.moveaxis(src, axis, 0).reshape((indices.size,) + dst.shape[1:])
    flat = indices.reshape(-1)
    if flat.size and np.unique(flat).size == flat.size:
        dst[flat] += s
    else:
        np.add.at(dst, flat, s)


def index_add(src: Tensor, indices, size: int, axis: int = 0) -> Tensor:
    """Scatter-add ``src`` slices into a zero tensor with ``size`` along ``axis``."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % src.ndim
    shape = list(src.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=src.dtype)
    _scatter_add_into(out, indices, src.data, axis)

    def bw(g):
        return (np.take(g, indices, axis=axis),)

    return make_node(out, (src,), bw, "index_add")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_node(np.stack([x.data for x in xs], axis=axis), xs, bw, "stack")


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_node(np.cumsum(x.data, axis=axis), (x,), bw, "cumsum")


def solve_unit_lower(lower: Tensor, rhs: Tensor) -> Tensor:
    """Solve ``L X = B`` with ``L`` unit lower triangular.

    Only the strictly-lower part of ``lower`` is read; the diagonal is taken
    as one. Batched over leading axes.
    """
    n = lower.shape[-1]
    eye = np.eye(n, dtype=lower.dtype)
    mat = np.tril(lower.data, -1) + eye
    x = np.linalg.solve(mat, rhs.data)

    def bw(g):
        g_rhs = np.linalg.solve(np.swapaxes(mat, -1, -2), g)
        g_low = None
        if lower.requires_grad:
            g_low = _reduce_batch(np.tril(-(g_rhs @ np.swapaxes(x, -1, -2)), -1), lower.shape)
        return g_low, _reduce_batch(g_rhs, rhs.shape)

    return make_node(x.astype(rhs.dtype, copy=False), (lower, rhs), bw, "solve_unit_lower")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax over the last axis, max-subtracted."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_lastdim: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * gamma`` over the last axis.

    ``gamma`` is ``[d]`` or, for stacked per-block weights, a same-rank
    tensor broadcastable against ``x``.
    """
    if eps <= 0:
        raise ValueError("rmsnorm eps must be positive")
    d = x.shape[-1]
    if gamma.shape[-1] != d or (gamma.ndim != 1 and gamma.ndim != x.ndim):
        raise ValueError(f"rmsnorm gamma shape {gamma.shape} does not match {x.shape}")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * gamma.data

    def bw(g):
        gx = ggam = None
        gg = g * gamma.data
        if x.requires_grad:
            gx = inv * (gg - xhat * (gg * xhat).sum(axis=-1, keepdims=True) / d)
        if gamma.requires_grad:
            if gamma.ndim == 1:
                ggam = (g * xhat).reshape(-1, d).sum(axis=0)
            else:
                ggam = _unbroadcast(g * xhat, gamma.shape)
        return gx, ggam

    return make_node(out.astype(x.dtype, copy=False), (x, gamma), bw, "rmsnorm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows of the last axis to unit L2 norm."""
    inv = 1.0 / np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data * inv

    def bw(g):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (x,), bw, "l2_normalize")


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"cross_entropy: target out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(targets.size)
    n = max(targets.size, 1)
    loss = -logp[rows, targets].sum() / n

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
