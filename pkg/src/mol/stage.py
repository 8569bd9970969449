"""Thin blocks and the routed split stage.

A thin block projects the residual stream down to ``d_thin``, runs a full
pre-norm transformer block there and projects only the block's delta back
up. A split stage adds the deltas of its always-on shared blocks and the
router-weighted average of its top-K routed blocks to the residual stream.

Three dispatch modes evaluate the same function:

* ``dense``   every routed block runs over all T tokens with its attention
              restricted to the tokens routed to it; unselected rows are
              weighted by zero.
* ``sparse``  each routed block gathers its tokens, runs on the compact
              sequence and scatter-adds the weighted delta back.
* ``batched`` all routed blocks' gathered sequences are padded to a common
              length and evaluated as one stacked computation.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensorcore as tc
from .attention import D_HEAD, RopeTable, SoftmaxAttnParams, softmax_attention
from .deltanet import DEFAULT_CHUNK, DeltaParams, delta_attention
from .ffn import DenseFFN, Rank1MoE
from .nn import Module, constant, stack_modules
from .router import RoutingDecision, Router, SEGate, cv2_loss, route_topk, se_gate
from .tensorcore import Tensor

MODES = ("dense", "sparse", "batched")
ATTN_TYPES = ("softmax", "delta")
FFN_TYPES = ("dense", "rank1-moe")
NORM_EPS = 1e-6

_NOTATION = re.compile(r"^\s*(\d+)\+(\d+)of(\d+)@(\d+)\s*$")


@dataclass(frozen=True)
class StageSpec:
    """Topology ``S+KofN`` of one split stage and its block types."""

    n_blocks: int
    shared: int
    k: int
    d_thin: int
    d_ff: int = 0  # 0 means 4 * d_thin
    routed_attn: str = "softmax"
    shared_attn: str = "softmax"
    ffn: str = "dense"
    se_gating: bool = False
    moe_experts: int = 16
    moe_k: int = 2
    shared_in_average: bool = False
    renormalize: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def n_routed(self) -> int:
        return self.n_blocks - self.shared

    @property
    def ff(self) -> int:
        return self.d_ff or 4 * self.d_thin

    @property
    def notation(self) -> str:
        return f"{self.shared}+{self.k}of{self.n_blocks}@{self.d_thin}"

    def validate(self) -> None:
        if not 0 <= self.shared < self.n_blocks:
            raise ValueError(f"stage {self.notation}: need 0 <= S < N")
        if not 1 <= self.k <= self.n_blocks - self.shared:
            raise ValueError(f"stage {self.notation}: need 1 <= K <= N - S")
        if self.d_thin <= 0 or self.d_thin % D_HEAD:
            raise ValueError(f"stage {self.notation}: d_thin must be a positive multiple of {D_HEAD}")
        if self.routed_attn not in ATTN_TYPES:
            raise ValueError(f"stage {self.notation}: routed_attn must be one of {ATTN_TYPES}")
        if self.shared_attn != "softmax":
            raise ValueError(f"stage {self.notation}: shared blocks always use softmax attention")
        if self.ffn not in FFN_TYPES:
            raise ValueError(f"stage {self.notation}: ffn must be one of {FFN_TYPES}")
        if self.ffn == "rank1-moe" and not 1 <= self.moe_k <= self.moe_experts:
            raise ValueError(f"stage {self.notation}: need 1 <= moe_k <= moe_experts")

    def to_text(self, defaults: "StageSpec | None" = None) -> str:
        """``S+KofN@d`` followed by ``key=value`` for fields differing from ``defaults``."""
        parts = [self.notation]
        base = defaults or StageSpec(self.n_blocks, self.shared, self.k, self.d_thin)
        for f in fields(self):
            if f.name in ("n_blocks", "shared", "k", "d_thin"):
                continue
            value = getattr(self, f.name)
            if value != getattr(base, f.name):
                parts.append(f"{f.name}={_fmt(value)}")
        return " ".join(parts)

    @classmethod
    def parse(cls, text: str, **defaults) -> "StageSpec":
        head, *opts = text.split()
        m = _NOTATION.match(head)
        if not m:
            raise ValueError(f"bad stage notation {head!r}; expected S+KofN@d_thin")
        s, k, n, d = map(int, m.groups())
        kwargs = dict(defaults)
        types = {f.name: f.type for f in fields(cls)}
        for opt in opts:
            key, _, value = opt.partition("=")
            if key not in types or key in ("n_blocks", "shared", "k", "d_thin"):
                raise ValueError(f"unknown stage option {key!r}")
            kwargs[key] = _parse_value(value, types[key])
        return cls(n, s, k, d, **kwargs)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(text: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    if typ == "int":
        return int(text)
    return text


class Block(Module):
    """Pre-norm transformer block ``norm -> attention -> norm -> FFN`` at width ``d``."""

    def __init__(self, d: int, attn: str, ffn: str, d_ff: int, rng: np.random.Generator, out_std: float,
                 moe_experts: int = 16, moe_k: int = 2, dtype=np.float32):
        self.attn_type = attn
        self.norm1 = constant((d,), 1.0, dtype)
        if attn == "softmax":
            self.attn = SoftmaxAttnParams(d, rng, out_std=out_std, dtype=dtype)
        else:
            self.attn = DeltaParams(d, rng, out_std=out_std, dtype=dtype)
        self.norm2 = constant((d,), 1.0, dtype)
        if ffn == "dense":
            self.ffn = DenseFFN(d, d_ff, rng, out_std=out_std, dtype=dtype)
        else:
            self.ffn = Rank1MoE(d, moe_experts, moe_k, rng, out_std=out_std, dtype=dtype)

    def delta(self, h: Tensor, positions, table: RopeTable, visible=None, chunk: int = DEFAULT_CHUNK) -> Tensor:
        """``Block(h) - h``, i.e. attention delta plus FFN delta.

        Summing the two deltas directly equals the residual-stripped block
        output without cancelling ``h`` in floating point.
        """
        a = self.mix(tc.rmsnorm(h, _gain(self.norm1, h), NORM_EPS), positions, table, visible, chunk)
        h1 = h + a
        f = self.ffn(tc.rmsnorm(h1, _gain(self.norm2, h1), NORM_EPS))
        return a + f

    def mix(self, z: Tensor, positions, table: RopeTable, visible=None, chunk: int = DEFAULT_CHUNK) -> Tensor:
        if self.attn_type == "softmax":
            return softmax_attention(z, self.attn, positions, table, key_mask=visible)
        return delta_attention(z, self.attn, visible=visible, chunk=chunk)


def _gain(gamma: Tensor, h: Tensor) -> Tensor:
    if gamma.ndim == 1:
        return gamma
    # stacked [B, d] against h [B, m, d]
    return tc.reshape(gamma, (gamma.shape[0], 1, gamma.shape[1]))


class ThinBlock(Module):
    def __init__(self, d_model: int, spec: StageSpec, attn: str, rng: np.random.Generator, std: float, out_std: float, dtype=np.float32):
        from .nn import trunc_normal

        self.w_down = trunc_normal(rng, (spec.d_thin, d_model), std, dtype)
        self.inner = Block(spec.d_thin, attn, spec.ffn, spec.ff, rng, out_std, spec.moe_experts, spec.moe_k, dtype)
        self.w_up = trunc_normal(rng, (d_model, spec.d_thin), out_std, dtype)


def thin_block(x: Tensor, p: ThinBlock, visible, table: RopeTable, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """``W_up (Block(W_down x_v) - W_down x_v)`` over the sorted token subset ``visible``.

    Returns ``[len(visible), d_model]``; tokens keep their global positions.
    """
    visible = np.asarray(visible, dtype=np.intp)
    if visible.size == 0:
        return Tensor(np.zeros((0, x.shape[-1]), dtype=x.dtype))
    xv = x if visible.size == x.shape[0] and np.array_equal(visible, np.arange(x.shape[0])) else tc.take(x, visible, 0)
    h = tc.linear(xv, p.w_down)
    return tc.linear(p.inner.delta(h, visible, table, chunk=chunk), p.w_up)


def thin_block_masked(x: Tensor, p: ThinBlock, mask: np.ndarray, table: RopeTable, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Full-length evaluation whose rows at ``mask`` equal :func:`thin_block` on that subset."""
    T = x.shape[0]
    h = tc.linear(x, p.w_down)
    return tc.linear(p.inner.delta(h, np.arange(T), table, visible=mask, chunk=chunk), p.w_up)


class SplitStage(Module):
    def __init__(self, d_model: int, spec: StageSpec, rng: np.random.Generator, std: float, out_std: float, dtype=np.float32):
        self.spec = spec
        self.blocks = [
            ThinBlock(d_model, spec, spec.shared_attn if i < spec.shared else spec.routed_attn, rng, std, out_std, dtype)
            for i in range(spec.n_blocks)
        ]
        self.router = Router(d_model, spec.n_routed, rng, std, dtype)
        self.se = SEGate(spec.k, rng, dtype=dtype) if spec.se_gating else None

    @property
    def shared_blocks(self) -> list[ThinBlock]:
        return self.blocks[: self.spec.shared]

    @property
    def routed_blocks(self) -> list[ThinBlock]:
        return self.blocks[self.spec.shared :]

    def route(self, x: Tensor) -> RoutingDecision:
        return route_topk(self.router(x), self.spec.k, renormalize=self.spec.renormalize)

    def __call__(self, x: Tensor, table: RopeTable, mode: str = "dense", chunk: int = DEFAULT_CHUNK):
        return split_stage(x, self, table, mode, chunk)


def _norms(out: Tensor) -> Tensor:
    return tc.sqrt(tc.sum(out * out, axis=-1) + 1e-12)


def _se_scale(stage: SplitStage, decision: RoutingDecision, norms_flat: Tensor, T: int) -> Tensor:
    """Per-(token, block) SE multipliers ``[T, N_r]`` from block-major output norms ``[N_r * T]``."""
    sel = decision.selected
    K = sel.shape[1]
    n_r = stage.spec.n_routed
    rows = np.repeat(np.arange(T), K)
    mags = tc.reshape(tc.take(norms_flat, sel.reshape(-1) * T + rows, 0), (T, K))
    s = se_gate(mags, stage.se)
    scale = tc.index_add(tc.reshape(s, (T * K,)), rows * n_r + sel.reshape(-1), T * n_r, 0)
    return tc.reshape(scale, (T, n_r))


def split_stage(x: Tensor, stage: SplitStage, table: RopeTable, mode: str = "dense", chunk: int = DEFAULT_CHUNK):
    """``x + sum_shared ThinBlock_s(x) + (1/K) sum_{i in topK} w_i ThinBlock_i(x)``.

    Returns ``(y, cv2_aux, decision)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown dispatch mode {mode!r}; expected one of {MODES}")
    spec = stage.spec
    T, d = x.shape
    everyone = np.arange(T)
    decision = stage.route(x)
    gates = decision.gates
    n_r = spec.n_routed
    routed = stage.routed_blocks
    token_sets = [decision.tokens_for(i) for i in range(n_r)]

    shared = [thin_block(x, p, everyone, table, chunk) for p in stage.shared_blocks]

    if mode == "dense":
        masks = np.zeros((n_r, T), dtype=bool)
        for i, idx in enumerate(token_sets):
            masks[i, idx] = True
        outs = [thin_block_masked(x, p, masks[i], table, chunk) for i, p in enumerate(routed)]
        if stage.se is not None:
            flat = tc.concat([_norms(o) for o in outs], axis=0)
            gates = gates * _se_scale(stage, decision, flat, T)
        parts = [o * tc.take(gates, [i], 1) for i, o in enumerate(outs)]
    elif mode == "sparse":
        outs = [thin_block(x, p, idx, table, chunk) for p, idx in zip(routed, token_sets)]
        if stage.se is not None:
            flat = _sum_all([tc.index_add(_norms(o), idx + i * T, n_r * T, 0) for i, (o, idx) in enumerate(zip(outs, token_sets)) if idx.size], n_r * T, x.dtype)
            gates = gates * _se_scale(stage, decision, flat, T)
        parts = []
        for i, (o, idx) in enumerate(zip(outs, token_sets)):
            if idx.size == 0:
                continue
            w = tc.take(tc.take(gates, [i], 1), idx, 0)
            parts.append(tc.index_add(o * w, idx, T, 0))
    else:
        parts, gates = _batched_routed(x, stage, decision, token_sets, table, chunk)

    routed_sum = _sum_all(parts, (T, d), x.dtype)
    shared_sum = _sum_all(shared, (T, d), x.dtype)
    if spec.shared_in_average:
        y = x + (shared_sum + routed_sum) * (1.0 / (spec.shared + spec.k))
    else:
        y = x + shared_sum + routed_sum * (1.0 / spec.k)
    return y, cv2_loss(decision.load), decision


def _sum_all(parts, shape, dtype) -> Tensor:
    if not parts:
        return Tensor(np.zeros(shape, dtype=dtype))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def _batched_routed(x: Tensor, stage: SplitStage, decision: RoutingDecision, token_sets, table: RopeTable, chunk: int):
    """Stack every routed block into one padded ``[N_r, m_max, ...]`` evaluation."""
    T, d = x.shape
    n_r = stage.spec.n_routed
    counts = np.array([len(s) for s in token_sets])
    m = int(counts.max()) if counts.size else 0
    gates = decision.gates
    if m == 0:
        return [], gates
    index = np.zeros((n_r, m), dtype=np.intp)
    valid = np.zeros((n_r, m), dtype=bool)
    for i, idx in enumerate(token_sets):
        index[i, : len(idx)] = idx
        valid[i, : len(idx)] = True
    stacked = stack_modules(stage.routed_blocks)
    xg = tc.reshape(tc.take(x, index.reshape(-1), 0), (n_r, m, d))
    h = tc.linear(xg, stacked.w_down)
    # padding sits after every real token, so causal mixing never reads it
    out = tc.linear(stacked.inner.delta(h, index, table, chunk=chunk), stacked.w_up)
    flat_valid = np.flatnonzero(valid.reshape(-1))
    rows = tc.take(tc.reshape(out, (n_r * m, d)), flat_valid, 0)
    block_of = np.repeat(np.arange(n_r), m)[flat_valid]
    token_of = index.reshape(-1)[flat_valid]
    if stage.se is not None:
        flat = tc.index_add(_norms(rows), block_of * T + token_of, n_r * T, 0)
        gates = gates * _se_scale(stage, decision, flat, T)
    w = tc.reshape(tc.take(tc.reshape(gates, (T * n_r,)), token_of * n_r + block_of, 0), (len(flat_valid), 1))
    return [tc.index_add(rows * w, token_of, T, 0)], gates


def with_mode_defaults(spec: StageSpec, **changes) -> StageSpec:
    return replace(spec, **changes)
