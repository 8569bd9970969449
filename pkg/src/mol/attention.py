"""Rotary embeddings, causal softmax attention and KV-cache decoding.

All attention here works on head-major tensors ``[..., H, T, d_head]``.
Rotary angles are indexed by *global* sequence position, so a token keeps
its position when gathered into a block's compact sub-sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .macs import MacCounter
from .nn import Module, trunc_normal
from .tensorcore import Tensor, make_node, take

D_HEAD = 64
ROPE_BASE = 10000.0

# Upper bound on the float elements of one score tile; keeps T=16K in RAM.
_TILE_ELEMS = 1 << 24


@dataclass(frozen=True)
class RopeTable:
    cos: np.ndarray  # [t_max, d_head/2]
    sin: np.ndarray
    base: float
    d_head: int

    @property
    def t_max(self) -> int:
        return self.cos.shape[0]


def build_rope(d_head: int = D_HEAD, t_max: int = 4096, base: float = ROPE_BASE) -> RopeTable:
    """Tables of ``t * base**(-2i/d_head)`` for every position below ``t_max``."""
    if d_head % 2:
        raise ValueError(f"rotary embedding needs an even head width, got {d_head}")
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.outer(np.arange(t_max, dtype=np.float64), inv_freq)
    return RopeTable(np.cos(angles), np.sin(angles), float(base), d_head)


_rope_cache: dict[tuple[int, int, float], RopeTable] = {}


def shared_rope(t_max: int, d_head: int = D_HEAD, base: float = ROPE_BASE) -> RopeTable:
    """One table per (t_max, d_head, base); every attention width reuses it."""
    key = (t_max, d_head, base)
    if key not in _rope_cache:
        _rope_cache[key] = build_rope(d_head, t_max, base)
    return _rope_cache[key]


def apply_rope(x: Tensor, positions, table: RopeTable) -> Tensor:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` of ``x[..., T, d]`` by position."""
    positions = np.asarray(positions, dtype=np.intp)
    d = x.shape[-1]
    if d != table.d_head:
        raise ValueError(f"head width {d} does not match rope table width {table.d_head}")
    if positions.shape[-1] != x.shape[-2] or positions.ndim > 2:
        raise ValueError(f"positions shape {positions.shape} vs sequence extent {x.shape[-2]}")
    if positions.size and (positions.max() >= table.t_max or positions.min() < 0):
        raise ValueError(f"position {int(positions.max())} outside rope table of length {table.t_max}")
    cos = table.cos[positions].astype(x.dtype)
    sin = table.sin[positions].astype(x.dtype)
    if positions.ndim == 2:
        # one position row per stacked block: [B, T] against x [B, H, T, d]
        cos = cos[:, None]
        sin = sin[:, None]
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return make_node(out, (x,), bw, "rope")


def _allowed(i0: int, i1: int, key_mask: np.ndarray | None) -> np.ndarray:
    rows = np.arange(i0, i1)[:, None]
    cols = np.arange(i1)[None, :]
    ok = cols <= rows
    if key_mask is not None:
        ok &= key_mask[None, :i1] | (cols == rows)
    return ok


def causal_attention(q: Tensor, k: Tensor, v: Tensor, key_mask=None) -> Tensor:
    """``out_t = sum_{s<=t} softmax_s(q_t.k_s / sqrt(d)) v_s``.

    ``key_mask`` (bool ``[T]``), when given, hides keys whose entry is False
    from every query except the key's own position; the diagonal stays
    visible so no row is empty. Queries are processed in tiles and the
    backward pass recomputes scores from the saved log-sum-exp.
    """
    if not (q.shape == k.shape and k.shape[:-1] == v.shape[:-1]):
        raise ValueError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    *lead, T, d = q.shape
    dv = v.shape[-1]
    scale = 1.0 / np.sqrt(d)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
    B = int(np.prod(lead)) if lead else 1
    qd = q.data.reshape(B, T, d)
    kd = k.data.reshape(B, T, d)
    vd = v.data.reshape(B, T, dv)
    dtype = q.dtype
    out = np.empty((B, T, dv), dtype=dtype)
    lse = np.empty((B, T), dtype=dtype)
    tile = max(1, min(T, _TILE_ELEMS // max(1, B * T)))
    neg = np.array(-np.inf, dtype=dtype)
    for i0 in range(0, T, tile):
        i1 = min(T, i0 + tile)
        s = (qd[:, i0:i1] @ np.swapaxes(kd[:, :i1], 1, 2)) * dtype.type(scale)
        s = np.where(_allowed(i0, i1, key_mask), s, neg)
        m = s.max(axis=-1, keepdims=True)
        p = np.exp(s - m)
        denom = p.sum(axis=-1, keepdims=True)
        out[:, i0:i1] = (p @ vd[:, :i1]) / denom
        lse[:, i0:i1] = (m + np.log(denom))[..., 0]

    def bw(g):
        g = g.reshape(B, T, dv)
        gq = np.zeros_like(qd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        delta = (g * out).sum(axis=-1)
        for i0 in range(0, T, tile):
            i1 = min(T, i0 + tile)
            s = (qd[:, i0:i1] @ np.swapaxes(kd[:, :i1], 1, 2)) * dtype.type(scale)
            s = np.where(_allowed(i0, i1, key_mask), s, neg)
            p = np.exp(s - lse[:, i0:i1, None])
            go = g[:, i0:i1]
            gv[:, :i1] += np.swapaxes(p, 1, 2) @ go
            dp = go @ np.swapaxes(vd[:, :i1], 1, 2)
            ds = p * (dp - delta[:, i0:i1, None]) * dtype.type(scale)
            gq[:, i0:i1] = ds @ kd[:, :i1]
            gk[:, :i1] += np.swapaxes(ds, 1, 2) @ qd[:, i0:i1]
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    return make_node(out.reshape(*lead, T, dv), (q, k, v), bw, "causal_attention")


def check_subset(subset, T: int) -> np.ndarray:
    subset = np.asarray(subset, dtype=np.intp)
    if subset.ndim != 1:
        raise ValueError("subset must be a flat index list")
    if subset.size and (subset[0] < 0 or subset[-1] >= T):
        raise ValueError(f"subset indices must lie in [0, {T})")
    if np.any(np.diff(subset) <= 0):
        raise ValueError("subset must be strictly increasing (sorted, no duplicates)")
    return subset


def restricted_attention(q: Tensor, k: Tensor, v: Tensor, subset) -> Tensor:
    """Causal attention evaluated as if only ``subset`` positions exist.

    Inputs are ``[H, T, d]`` with rotary already applied at global
    positions; the result is ``[H, len(subset), d]``.
    """
    subset = check_subset(subset, q.shape[-2])
    axis = q.ndim - 2
    return causal_attention(take(q, subset, axis), take(k, subset, axis), take(v, subset, axis))


def attention_decode_macs(length: int, heads: int, d_head: int = D_HEAD) -> int:
    """Scores (one ``d_head`` dot product per cached key) plus the value mix."""
    return 2 * length * heads * d_head


@dataclass
class KVCache:
    """Per-block key/value history of shape ``[H, t_max, d_head]``."""

    keys: np.ndarray
    values: np.ndarray
    length: int = 0

    @classmethod
    def empty(cls, heads: int, t_max: int, d_head: int = D_HEAD, dtype=np.float32) -> "KVCache":
        return cls(np.zeros((heads, t_max, d_head), dtype), np.zeros((heads, t_max, d_head), dtype))

    @property
    def capacity(self) -> int:
        return self.keys.shape[1]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        if self.length >= self.capacity:
            raise ValueError(f"KV cache overflow at length {self.length}")
        self.keys[:, self.length] = k
        self.values[:, self.length] = v
        self.length += 1


def kv_decode_step(cache: KVCache, q_t: Tensor, k_t: Tensor, v_t: Tensor, counter: MacCounter | None = None) -> Tensor:
    """Append ``k_t, v_t`` (``[H, 1, d]``) and attend ``q_t`` over the whole cache."""
    cache.append(k_t.data[:, 0], v_t.data[:, 0])
    L = cache.length
    keys = cache.keys[:, :L]
    vals = cache.values[:, :L]
    H, _, d = q_t.shape
    s = (q_t.data @ np.swapaxes(keys, 1, 2)) * q_t.dtype.type(1.0 / np.sqrt(d))
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    out = (p @ vals) / p.sum(axis=-1, keepdims=True)
    if counter is not None:
        counter.add("attention.softmax", attention_decode_macs(L, H, d))
    return Tensor(out.astype(q_t.dtype, copy=False))


class SoftmaxAttnParams(Module):
    """Query/key/value/output maps of a rotary softmax attention mixer at width ``d``."""

    def __init__(self, d: int, rng: np.random.Generator, std: float = 0.02, out_std: float | None = None, dtype=np.float32):
        if d % D_HEAD:
            raise ValueError(f"attention width {d} must be a multiple of {D_HEAD}")
        self.w_q = trunc_normal(rng, (d, d), std, dtype)
        self.w_k = trunc_normal(rng, (d, d), std, dtype)
        self.w_v = trunc_normal(rng, (d, d), std, dtype)
        self.w_o = trunc_normal(rng, (d, d), out_std if out_std is not None else std, dtype)


def _heads(x: Tensor, H: int) -> Tensor:
    *lead, T, C = x.shape
    return tc.swapaxes(tc.reshape(x, (*lead, T, H, C // H)), -2, -3)


def softmax_qkv(x: Tensor, p, positions, table: RopeTable) -> tuple[Tensor, Tensor, Tensor]:
    """Head-split rotary queries/keys and values for ``x[..., T, d]``."""
    H = x.shape[-1] // D_HEAD
    q = apply_rope(_heads(tc.linear(x, p.w_q), H), positions, table)
    k = apply_rope(_heads(tc.linear(x, p.w_k), H), positions, table)
    v = _heads(tc.linear(x, p.w_v), H)
    return q, k, v


def merge_heads(o: Tensor) -> Tensor:
    *lead, H, T, d = o.shape
    return tc.reshape(tc.swapaxes(o, -2, -3), (*lead, T, H * d))


def softmax_attention(x: Tensor, p, positions, table: RopeTable, key_mask=None) -> Tensor:
    """Rotary causal attention mixer; ``positions`` are global sequence indices."""
    q, k, v = softmax_qkv(x, p, positions, table)
    return tc.linear(merge_heads(causal_attention(q, k, v, key_mask=key_mask)), p.w_o)
