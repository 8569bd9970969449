"""Gated delta-rule linear attention.

Per head the state ``S`` (``d_v x d_k``) evolves as

    S_t = a_t * S_{t-1} (I - b_t k_t k_t^T) + b_t v_t k_t^T,   o_t = S_t q_t

with unit-norm keys/queries, write strength ``b_t`` in (0, 1) and decay
``a_t`` in (0, 1]. :func:`delta_recurrent` applies this literally and is the
reference; :func:`delta_chunked` evaluates the same map blockwise and
:func:`delta_decode_step` advances a single token.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensorcore as tc
from .attention import D_HEAD
from .macs import MacCounter
from .nn import Module, constant, trunc_normal
from .tensorcore import Tensor, make_node

CONV_WIDTH = 4
DEFAULT_CHUNK = 64


@dataclass
class DeltaState:
    S: np.ndarray  # [..., H, d_v, d_k]
    step: int = 0

    @classmethod
    def zeros(cls, heads: int, d_k: int = D_HEAD, d_v: int = D_HEAD, dtype=np.float32, lead=()) -> "DeltaState":
        return cls(np.zeros((*lead, heads, d_v, d_k), dtype=dtype))


@dataclass
class DeltaFeatures:
    """Recurrence inputs: ``q, k, v`` are ``[..., H, T, d]``; gates are ``[..., H, T]``."""

    q: Tensor
    k: Tensor
    v: Tensor
    beta: Tensor
    alpha: Tensor
    log_alpha: Optional[Tensor] = None

    @property
    def length(self) -> int:
        return self.q.shape[-2]

    def decay_log(self) -> Tensor:
        return self.log_alpha if self.log_alpha is not None else tc.log(self.alpha)

    def step(self, t: int) -> "DeltaFeatures":
        """Single-position slice (kept as length-1 sequences)."""
        sl = (Ellipsis, slice(t, t + 1))
        return DeltaFeatures(
            tc.getitem(self.q, sl + (slice(None),)),
            tc.getitem(self.k, sl + (slice(None),)),
            tc.getitem(self.v, sl + (slice(None),)),
            tc.getitem(self.beta, sl),
            tc.getitem(self.alpha, sl),
            None if self.log_alpha is None else tc.getitem(self.log_alpha, sl),
        )

    def restrict(self, visible: np.ndarray) -> "DeltaFeatures":
        """Make hidden positions no-ops: no write (beta=0) and no decay (alpha=1)."""
        m = np.asarray(visible, dtype=self.beta.dtype)
        m = m.reshape((1,) * (self.beta.ndim - 1) + (-1,))
        log_a = self.decay_log() * m
        return DeltaFeatures(self.q, self.k, self.v, self.beta * m, tc.exp(log_a), log_a)


def conv_history(T: int, visible=None, width: int = CONV_WIDTH) -> np.ndarray:
    """Source positions ``[width, T]`` for each conv tap (``-1`` = zero padding).

    With ``visible`` the taps walk back over visible positions only, so a
    full-length pass reproduces the convolution over the gathered subset.
    """
    hist = np.full((width, T), -1, dtype=np.intp)
    if visible is None:
        for j in range(width):
            hist[j, j:] = np.arange(T - j)
        return hist
    pos = np.flatnonzero(np.asarray(visible, dtype=bool))
    hist[0] = np.arange(T)
    for j in range(1, width):
        hist[j, pos[j:]] = pos[:-j] if j < len(pos) else pos[:0]
    return hist


def causal_conv(x: Tensor, weight: Tensor, bias: Tensor, history: np.ndarray | None = None) -> Tensor:
    """Depthwise causal convolution ``out[t] = b + sum_j w[j] * x[history[j, t]]``.

    ``x`` is ``[..., T, C]``, ``weight`` ``[..., W, C]``, ``bias`` ``[..., C]``.
    """
    *lead, T, C = x.shape
    W = weight.shape[-2]
    if history is None:
        history = conv_history(T, width=W)
    idx = history + 1
    pad = np.zeros((*lead, 1, C), dtype=x.dtype)
    xpad = np.concatenate([pad, x.data], axis=-2)
    taps = [np.take(xpad, idx[j], axis=-2) for j in range(W)]
    wd = weight.data
    out = bias.data[..., None, :] + sum(wd[..., j : j + 1, :] * taps[j] for j in range(W))

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            for j in range(W):
                contrib = g * wd[..., j : j + 1, :]
                np.add.at(np.moveaxis(gpad, -2, 0), idx[j], np.moveaxis(contrib, -2, 0))
            gx = gpad[..., 1:, :]
        if weight.requires_grad:
            gw = np.stack([(g * taps[j]).sum(axis=-2) for j in range(W)], axis=-2)
            gw = _sum_to(gw, weight.shape)
        if bias.requires_grad:
            gb = _sum_to(g.sum(axis=-2), bias.shape)
        return gx, gw, gb

    return make_node(out.astype(x.dtype, copy=False), (x, weight, bias), bw, "causal_conv")


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, T, C = x.shape
    return tc.swapaxes(tc.reshape(x, (*lead, T, heads, C // heads)), -2, -3)


def delta_features(x: Tensor, p: "DeltaParams", history: np.ndarray | None = None) -> DeltaFeatures:
    """q/k/v through linear map, width-4 causal conv and SiLU; q/k unit-normalised.

    ``beta = sigmoid(x W_beta)``; ``alpha = exp(-softplus(a) * sigmoid(x W_alpha))``.
    Weights may carry a leading block axis matching ``x``'s.
    """
    d = x.shape[-1]
    if d % D_HEAD or d != p.w_q.shape[-1]:
        raise ValueError(f"delta features: width {d} must match weights {p.w_q.shape} and be a multiple of {D_HEAD}")
    H = d // D_HEAD

    def branch(w, cw, cb):
        return _split_heads(tc.silu(causal_conv(tc.linear(x, w), cw, cb, history)), H)

    q = tc.l2_normalize(branch(p.w_q, p.conv_q, p.conv_bias_q))
    k = tc.l2_normalize(branch(p.w_k, p.conv_k, p.conv_bias_k))
    v = branch(p.w_v, p.conv_v, p.conv_bias_v)
    beta = tc.swapaxes(tc.sigmoid(tc.linear(x, p.w_beta)), -1, -2)
    rate = tc.softplus(p.a_decay)
    rate = tc.reshape(rate, rate.shape[:-1] + (1, rate.shape[-1]))
    log_alpha = tc.swapaxes(tc.neg(tc.sigmoid(tc.linear(x, p.w_alpha)) * rate), -1, -2)
    return DeltaFeatures(q, k, v, beta, tc.exp(log_alpha), log_alpha)


def _col(x: Tensor) -> Tensor:
    return tc.reshape(x, x.shape + (1,))


def _row(x: Tensor) -> Tensor:
    return tc.reshape(x, x.shape[:-1] + (1, x.shape[-1]))


def _gate(x: Tensor) -> Tensor:
    return tc.reshape(x, x.shape + (1, 1))


def delta_recurrent(f: DeltaFeatures, state: DeltaState | None = None) -> tuple[Tensor, DeltaState]:
    """Sequential reference evaluation of the gated delta rule."""
    *lead, T, dk = f.k.shape
    dv = f.v.shape[-1]
    S = Tensor(np.zeros((*lead, dv, dk), dtype=f.q.dtype) if state is None else state.S)
    outs = []
    for t in range(T):
        q_t = f.q[..., t, :]
        k_t = f.k[..., t, :]
        v_t = f.v[..., t, :]
        b_t = _gate(f.beta[..., t])
        a_t = _gate(f.alpha[..., t])
        erased = S - b_t * ((S @ _col(k_t)) @ _row(k_t))
        S = a_t * erased + b_t * (_col(v_t) @ _row(k_t))
        outs.append(tc.reshape(S @ _col(q_t), (*lead, dv)))
    if outs:
        out = tc.stack(outs, axis=-2)
    else:
        out = Tensor(np.zeros((*lead, 0, dv), dtype=f.q.dtype))
    step = 0 if state is None else state.step
    return out, DeltaState(S.data, step + T)


def delta_chunked(
    f: DeltaFeatures, chunk: int = DEFAULT_CHUNK, state: DeltaState | None = None
) -> tuple[Tensor, DeltaState]:
    """Blockwise evaluation: intra-chunk triangular solve plus inter-chunk state carry.

    Within a chunk with cumulative log-decay ``g``, the per-step corrections
    ``u_r = b_r (v_r - a_r S_{r-1} k_r)`` satisfy a unit lower-triangular
    system; outputs and the carried state follow in closed form.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    *lead, T, dk = f.k.shape
    dv = f.v.shape[-1]
    dtype = f.q.dtype
    S = Tensor(np.zeros((*lead, dv, dk), dtype=dtype) if state is None else state.S)
    log_a = f.decay_log()
    outs = []
    for c0 in range(0, T, chunk):
        c1 = min(T, c0 + chunk)
        C = c1 - c0
        sl = (Ellipsis, slice(c0, c1))
        Q = tc.getitem(f.q, sl + (slice(None),))
        K = tc.getitem(f.k, sl + (slice(None),))
        V = tc.getitem(f.v, sl + (slice(None),))
        b = tc.getitem(f.beta, sl)
        g = tc.cumsum(tc.getitem(log_a, sl), axis=-1)
        pad = (1,) * (g.ndim - 1)
        lower = np.tril(np.ones((C, C), dtype=dtype)).reshape(pad + (C, C))
        strict = np.tril(np.ones((C, C), dtype=dtype), -1).reshape(pad + (C, C))
        # decay ratios exp(g_r - g_j) for j <= r; the upper triangle is zeroed
        # before exp so it cannot overflow
        diff = (_col(g) - _row(g)) * lower
        decay = tc.exp(diff) * lower
        gate_row = tc.exp(g)
        KKt = K @ tc.swapaxes(K, -1, -2)
        A = _col(b) * decay * KKt * strict
        KS = K @ tc.swapaxes(S, -1, -2)
        rhs = _col(b) * (V - _col(gate_row) * KS)
        U = tc.solve_unit_lower(A, rhs)
        QS = Q @ tc.swapaxes(S, -1, -2)
        QKt = Q @ tc.swapaxes(K, -1, -2)
        outs.append(_col(gate_row) * QS + (decay * QKt) @ U)
        g_last = tc.getitem(g, (Ellipsis, slice(C - 1, C)))
        tail = tc.exp(g_last - g)
        S = _gate(tc.reshape(tc.exp(g_last), g_last.shape[:-1])) * S + tc.swapaxes(U * _col(tail), -1, -2) @ K
    if outs:
        out = outs[0] if len(outs) == 1 else tc.concat(outs, axis=-2)
    else:
        out = Tensor(np.zeros((*lead, 0, dv), dtype=dtype))
    step = 0 if state is None else state.step
    return out, DeltaState(S.data, step + T)


def delta_decode_macs(heads: int, d_k: int = D_HEAD, d_v: int = D_HEAD) -> int:
    """Decay, key read, rank-1 write and query read of one ``d_v x d_k`` state per head."""
    return 4 * heads * d_k * d_v


def delta_decode_step(
    state: DeltaState, f_t: DeltaFeatures, counter: MacCounter | None = None
) -> tuple[np.ndarray, DeltaState]:
    """Advance one position; returns ``(out_t [..., H, d_v], new_state)``."""
    S = state.S
    q = f_t.q.data[..., 0, :]
    k = f_t.k.data[..., 0, :]
    v = f_t.v.data[..., 0, :]
    b = f_t.beta.data[..., 0][..., None, None]
    a = f_t.alpha.data[..., 0][..., None, None]
    Sk = S @ k[..., :, None]
    S_new = a * (S - b * (Sk @ k[..., None, :])) + b * (v[..., :, None] @ k[..., None, :])
    out = (S_new @ q[..., :, None])[..., 0]
    if counter is not None:
        counter.add("attention.delta", delta_decode_macs(S.shape[-3], S.shape[-1], S.shape[-2]))
    return out, DeltaState(S_new, state.step + 1)


class DeltaParams(Module):
    """Weights of a gated delta-rule attention mixer at width ``d``."""

    def __init__(self, d: int, rng: np.random.Generator, std: float = 0.02, out_std: float | None = None, dtype=np.float32):
        if d % D_HEAD:
            raise ValueError(f"delta attention width {d} must be a multiple of {D_HEAD}")
        H = d // D_HEAD
        self.w_q = trunc_normal(rng, (d, d), std, dtype)
        self.w_k = trunc_normal(rng, (d, d), std, dtype)
        self.w_v = trunc_normal(rng, (d, d), std, dtype)
        for name in ("q", "k", "v"):
            w = np.zeros((CONV_WIDTH, d), dtype=dtype)
            w[0] = 1.0
            w[1:] = trunc_normal(rng, (CONV_WIDTH - 1, d), std, dtype).data
            setattr(self, f"conv_{name}", Tensor(w, requires_grad=True))
            setattr(self, f"conv_bias_{name}", constant((d,), 0.0, dtype))
        self.w_beta = trunc_normal(rng, (H, d), std, dtype)
        self.w_alpha = trunc_normal(rng, (H, d), std, dtype)
        # softplus(a) spread so per-step decay starts between ~0.99 and ~0.9
        rates = np.linspace(0.02, 0.2, H) if H > 1 else np.array([0.1])
        self.a_decay = Tensor(np.log(np.expm1(rates)).astype(dtype), requires_grad=True)
        self.w_o = trunc_normal(rng, (d, d), out_std if out_std is not None else std, dtype)

    @property
    def heads(self) -> int:
        return self.w_q.shape[-1] // D_HEAD


def delta_attention(
    x: Tensor,
    p: DeltaParams,
    visible: np.ndarray | None = None,
    chunk: int = DEFAULT_CHUNK,
    recurrent: bool = False,
) -> Tensor:
    """Full mixer: features, recurrence, merged heads, output projection.

    ``visible`` (bool ``[T]``) makes the pass over all ``T`` positions behave
    as if only the visible ones existed (conv taps and state updates skip
    hidden positions); outputs at hidden positions are meaningless.
    """
    *lead, T, d = x.shape
    history = None if visible is None else conv_history(T, visible)
    f = delta_features(x, p, history)
    if visible is not None:
        f = f.restrict(visible)
    out, _ = delta_recurrent(f) if recurrent else delta_chunked(f, chunk)
    merged = tc.reshape(tc.swapaxes(out, -2, -3), (*lead, T, d))
    return tc.linear(merged, p.w_o)
