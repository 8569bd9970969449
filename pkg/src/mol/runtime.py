"""Inference paths, analytic MAC counts, equivalence checks and wall-clock benchmarks."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .attention import (
    D_HEAD,
    KVCache,
    build_rope,
    causal_attention,
    kv_decode_step,
    merge_heads,
    restricted_attention,
    shared_rope,
    softmax_attention,
    softmax_qkv,
)
from .config import ModelConfig
from .deltanet import (
    CONV_WIDTH,
    DeltaParams,
    DeltaState,
    delta_attention,
    delta_chunked,
    delta_decode_macs,
    delta_decode_step,
    delta_features,
    delta_recurrent,
)
from .macs import MacCounter
from .model import DenseLayer, Model, build_model, check_tokens, forward_lm
from .router import route_topk, se_gate
from .stage import MODES, NORM_EPS, Block, SplitStage, StageSpec
from .tensorcore import Tensor

# ------------------------------------------------------------------ decoding


@dataclass
class BlockState:
    """Decode-time memory of one block: a KV cache or a delta state plus its conv window."""

    cache: KVCache | None = None
    delta: DeltaState | None = None
    window: list = field(default_factory=list)

    @classmethod
    def for_block(cls, block: Block, t_max: int, dtype) -> "BlockState":
        d = block.norm1.shape[-1]
        heads = d // D_HEAD
        if block.attn_type == "softmax":
            return cls(cache=KVCache.empty(heads, t_max, dtype=dtype))
        return cls(delta=DeltaState.zeros(heads, dtype=dtype))


def _block_step(block: Block, h: Tensor, pos: int, st: BlockState, table, counter: MacCounter) -> Tensor:
    """Delta of ``block`` for one new token ``h [1, d]`` given the block's past."""
    z = tc.rmsnorm(h, block.norm1, NORM_EPS)
    if block.attn_type == "softmax":
        q, k, v = softmax_qkv(z, block.attn, [pos], table)
        o = kv_decode_step(st.cache, q, k, v, counter)
        a = tc.linear(merge_heads(o), block.attn.w_o)
    else:
        # the conv only needs the block's last CONV_WIDTH inputs
        st.window = (st.window + [z.data])[-CONV_WIDTH:]
        f = delta_features(Tensor(np.concatenate(st.window, axis=0)), block.attn)
        out, st.delta = delta_decode_step(st.delta, f.step(len(st.window) - 1), counter)
        a = tc.linear(Tensor(out.reshape(1, -1)), block.attn.w_o)
    h1 = h + a
    return a + block.ffn(tc.rmsnorm(h1, block.norm2, NORM_EPS))


class DecodeSession:
    """Incremental greedy decoding with per-block caches.

    Routing is decided independently for every new token; a routed block's
    cache or state only holds the tokens that were routed to it, matching
    the visible-subset semantics of the full forward.
    """

    def __init__(self, model: Model):
        self.model = model
        cfg = model.cfg
        self.table = shared_rope(cfg.t_max)
        dtype = model.embed.dtype
        self.states: list[list[BlockState]] = []
        for layer in model.layers:
            if isinstance(layer, DenseLayer):
                self.states.append([BlockState.for_block(layer.block, cfg.t_max, dtype)])
            else:
                self.states.append([BlockState.for_block(b.inner, cfg.t_max, dtype) for b in layer.blocks])
        self.position = 0
        self.last_macs = MacCounter()

    def step(self, token: int) -> np.ndarray:
        """Feed one token; returns next-token logits ``[vocab]``."""
        cfg = self.model.cfg
        if self.position >= cfg.t_max:
            raise ValueError(f"decode state overflow: position {self.position} reaches t_max={cfg.t_max}")
        if not 0 <= token < cfg.vocab:
            raise ValueError(f"token {token} outside [0, {cfg.vocab})")
        macs = MacCounter()
        pos = self.position
        with tc.no_grad():
            x = tc.take(self.model.embed, [token], 0)
            for li, (layer, states) in enumerate(zip(self.model.layers, self.states)):
                if isinstance(layer, DenseLayer):
                    c = MacCounter()
                    x = x + _block_step(layer.block, x, pos, states[0], self.table, c)
                    _merge(macs, c, f"layer{li}.dense")
                    continue
                x = self._stage_step(layer, x, pos, states, macs, li)
            logits = tc.linear(tc.rmsnorm(x, self.model.final_norm, NORM_EPS), self.model.head)
        self.position += 1
        self.last_macs = macs
        return logits.data[0]

    def _stage_step(self, stage: SplitStage, x: Tensor, pos: int, states, macs: MacCounter, li: int) -> Tensor:
        spec = stage.spec
        total = Tensor(np.zeros_like(x.data))
        for b in range(spec.shared):
            c = MacCounter()
            total = total + self._thin_step(stage.blocks[b], x, pos, states[b], c)
            _merge(macs, c, f"layer{li}.shared{b}")
        decision = route_topk(stage.router(x), spec.k, renormalize=spec.renormalize)
        sel = decision.selected[0]
        outs = []
        for i in sel:
            c = MacCounter()
            outs.append(self._thin_step(stage.blocks[spec.shared + i], x, pos, states[spec.shared + i], c))
            _merge(macs, c, f"layer{li}.routed{i}")
        w = decision.gates.data[0, sel]
        if stage.se is not None:
            mags = Tensor(np.array([[np.sqrt(np.sum(o.data**2) + 1e-12) for o in outs]], dtype=x.dtype))
            w = w * se_gate(mags, stage.se).data[0]
        routed = Tensor(np.zeros_like(x.data))
        for wi, o in zip(w, outs):
            routed = routed + o * float(wi)
        if spec.shared_in_average:
            return x + (total + routed) * (1.0 / (spec.shared + spec.k))
        return x + total + routed * (1.0 / spec.k)

    def _thin_step(self, p, x: Tensor, pos: int, st: BlockState, counter: MacCounter) -> Tensor:
        h = tc.linear(x, p.w_down)
        return tc.linear(_block_step(p.inner, h, pos, st, self.table, counter), p.w_up)


def _merge(into: MacCounter, src: MacCounter, prefix: str) -> None:
    for k, v in src.items():
        into.add(f"{prefix}.{k}", v)


@dataclass
class DecodeResult:
    tokens: list[int]
    latencies: list[float]  # seconds per generated token
    macs: list[MacCounter]  # attention MACs per generated token
    contexts: list[int]  # context length (keys attended) at each generated token


def decode(model: Model, prompt, n: int) -> DecodeResult:
    """Greedy decoding: feed the prompt, then ``n`` argmax tokens."""
    prompt = check_tokens(prompt, model.cfg)
    if len(prompt) + n > model.cfg.t_max + 1:
        raise ValueError(f"prompt {len(prompt)} + {n} new tokens exceed t_max={model.cfg.t_max}")
    sess = DecodeSession(model)
    for t in prompt[:-1]:
        sess.step(int(t))
    tokens = [int(t) for t in prompt]
    out = DecodeResult([], [], [], [])
    nxt = int(prompt[-1])
    for _ in range(n):
        t0 = time.perf_counter()
        logits = sess.step(nxt)
        out.latencies.append(time.perf_counter() - t0)
        out.macs.append(sess.last_macs)
        out.contexts.append(sess.position)
        nxt = int(np.argmax(logits))
        out.tokens.append(nxt)
        tokens.append(nxt)
    return out


def argmax_chain(model: Model, prompt, n: int) -> list[int]:
    """Oracle for :func:`decode`: rerun the full forward for every new token."""
    seq = [int(t) for t in check_tokens(prompt, model.cfg)]
    out = []
    with tc.no_grad():
        for _ in range(n):
            logits, _ = forward_lm(model, seq, "sparse")
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            seq.append(nxt)
    return out


# --------------------------------------------------------------- MAC counts


def _balanced(total: int, n: int) -> list[int]:
    base, rem = divmod(total, n)
    return [base + 1 if i < rem else base for i in range(n)]


def _softmax_prefill_mix(m: int, heads: int) -> int:
    # scores and value mix over the causal triangle: sum_{t=1..m} 2 t H d
    return heads * D_HEAD * m * (m + 1)


def _attn_weights(d: int, kind: str) -> int:
    """Per-token MACs against attention weight matrices."""
    if kind == "softmax":
        return 4 * d * d
    heads = d // D_HEAD
    return 4 * d * d + 3 * CONV_WIDTH * d + 2 * heads * d


def _ffn_macs(d: int, spec: StageSpec | None, d_ff: int) -> int:
    if spec is not None and spec.ffn == "rank1-moe":
        return 2 * spec.moe_experts * d + spec.moe_k * d
    return 2 * d * d_ff


def _block_macs(c: MacCounter, tag: str, d: int, kind: str, ffn: int, m: int, phase: str, context: int) -> None:
    heads = d // D_HEAD
    c.add(f"{tag}.weights", m * (_attn_weights(d, kind) + ffn))
    if kind == "softmax":
        mix = _softmax_prefill_mix(m, heads) if phase == "prefill" else 2 * context * heads * D_HEAD
        c.add(f"{tag}.attention.softmax", mix)
    else:
        c.add(f"{tag}.attention.delta", m * delta_decode_macs(heads))


def mac_count(cfg: ModelConfig, T: int, phase: str = "prefill") -> MacCounter:
    """Exact multiply-accumulate tally.

    ``phase="prefill"`` counts a length-``T`` forward; ``phase="decode"``
    counts one new token whose context (keys attended, itself included) is
    ``T``. Routed blocks receive balanced loads: the ``T*K`` assignments are
    spread as evenly as integers allow, and a decoded token visits the K
    blocks with the largest share. Attention mixing is kept separate from
    weight MACs (``*.weights``) so each scaling law can be read off.
    """
    if phase not in ("prefill", "decode"):
        raise ValueError(f"unknown phase {phase!r}")
    c = MacCounter()
    n_tok = T if phase == "prefill" else 1
    d = cfg.d_model
    for li, spec in enumerate(cfg.stages):
        if spec is None:
            _block_macs(c, f"layer{li}.dense", d, cfg.dense_attn, 2 * d * cfg.dense_d_ff, n_tok, phase, T)
            continue
        dt = spec.d_thin
        ffn = _ffn_macs(dt, spec, spec.ff)
        proj = 2 * d * dt
        for b in range(spec.shared):
            tag = f"layer{li}.shared{b}"
            _block_macs(c, tag, dt, spec.shared_attn, ffn, n_tok, phase, T)
            c.add(f"{tag}.weights", n_tok * proj)
        c.add(f"layer{li}.router.weights", n_tok * spec.n_routed * d)
        loads = _balanced(T * spec.k, spec.n_routed)
        for i, m in enumerate(loads):
            if phase == "decode" and i >= spec.k:
                break
            tag = f"layer{li}.routed{i}"
            mm = m if phase == "prefill" else 1
            _block_macs(c, tag, dt, spec.routed_attn, ffn, mm, phase, m)
            c.add(f"{tag}.weights", mm * proj)
    c.add("head.weights", n_tok * cfg.vocab * d)
    return c


# ----------------------------------------------------------------- timing


def time_median(fn, repeats: int = 5, warmup: int = 1) -> tuple[float, list[float]]:
    """Median wall time over ``repeats`` runs after ``warmup`` discarded runs."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), times


@dataclass
class BenchRow:
    config: str
    mode: str
    T: int
    tokens_per_s: float
    latency_ms: float
    peak_live: int
    macs: int

    HEADER = "config,mode,T,tokens_per_s,latency_ms,peak_live,macs"

    def csv(self) -> str:
        return f"{self.config},{self.mode},{self.T},{self.tokens_per_s:.2f},{self.latency_ms:.4f},{self.peak_live},{self.macs}"


def peak_live_estimate(cfg: ModelConfig, T: int) -> int:
    """Analytic upper estimate of simultaneously live values in one forward."""
    from .attention import _TILE_ELEMS

    worst = 0
    for spec in cfg.stages:
        if spec is None:
            d, ff, heads, blocks = cfg.d_model, cfg.dense_d_ff, cfg.n_heads, [T]
        else:
            d, ff, heads = spec.d_thin, spec.ff, spec.d_thin // D_HEAD
            blocks = [T] * spec.shared + _balanced(T * spec.k, spec.n_routed)
        layer = sum(m * (6 * d + ff) + min(heads * m * m, _TILE_ELEMS) for m in blocks)
        worst = max(worst, layer)
    return T * (2 * cfg.d_model + cfg.vocab) + worst


def config_id(cfg: ModelConfig) -> str:
    parts = ["dense" if s is None else s.notation + ("-" + s.routed_attn if s.shared < s.n_blocks else "") for s in cfg.stages]
    return "|".join(parts)


def prefill(model: Model, tokens, mode: str = "sparse", repeats: int = 5) -> tuple[np.ndarray, BenchRow]:
    """Timed full-sequence forward; the first (warmup) run is not in the median."""
    if mode not in MODES:
        raise ValueError(f"unknown dispatch mode {mode!r}")
    tokens = check_tokens(tokens, model.cfg)
    result = {}

    def run():
        with tc.no_grad():
            result["logits"] = forward_lm(model, tokens, mode)[0].data

    med, _ = time_median(run, repeats)
    T = len(tokens)
    row = BenchRow(config_id(model.cfg), mode, T, T / med, 1000.0 * med / T, peak_live_estimate(model.cfg, T), mac_count(model.cfg, T).total)
    return result["logits"], row


# -------------------------------------------------------------- crossover


def _mixer_step(kind: str, d: int, T: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    p = DeltaParams(d, rng) if kind == "delta" else None
    if kind == "softmax":
        from .attention import SoftmaxAttnParams

        p = SoftmaxAttnParams(d, rng)
    x = Tensor(rng.normal(size=(T, d)).astype(np.float32))
    table = shared_rope(max(T, 1))
    w = rng.normal(size=(T, d)).astype(np.float32)

    def run():
        p.zero_grad()
        if kind == "softmax":
            y = softmax_attention(x, p, np.arange(T), table)
        else:
            y = delta_attention(x, p)
        tc.sum(y * w).backward()

    return run


def crossover_sweep(d: int, seqlens, repeats: int = 3) -> tuple[list[tuple[int, float, float]], int | None]:
    """Forward+backward time of one softmax vs one delta mixer at width ``d``.

    Returns rows ``(T, softmax_s, delta_s)`` and the first T where delta is faster.
    """
    rows = []
    cross = None
    for T in seqlens:
        s, _ = time_median(_mixer_step("softmax", d, T), repeats)
        dl, _ = time_median(_mixer_step("delta", d, T), repeats)
        rows.append((T, s, dl))
        if cross is None and dl < s:
            cross = T
    return rows, cross


# ------------------------------------------------------------ equivalence


ACCEPTANCE_CONFIGS = {
    "0+3of5-softmax": "d_model = 128\nn_layers = 2\nt_max = 256\nstage.0 = 0+3of5@64\nstage.1 = 0+3of5@64\n",
    "1+2of5-hybrid": "d_model = 128\nn_layers = 2\nt_max = 256\nstage.0 = 1+2of5@64 routed_attn=delta\nstage.1 = 1+2of5@64 routed_attn=delta\n",
    "1+3of15-hybrid": "d_model = 128\nn_layers = 2\nt_max = 256\nstage.0 = 1+3of15@64 routed_attn=delta\nstage.1 = 1+3of15@64 routed_attn=delta\n",
}


@dataclass
class Check:
    check: str
    config: str
    T: int
    max_diff: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_diff) and self.max_diff <= self.tol)

    def line(self) -> str:
        return f"{self.check},{self.config},{self.T},{self.max_diff:.3e},{'pass' if self.passed else 'fail'}"


def _maxdiff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))) if np.size(a) else 0.0


def mode_checks(name: str, cfg: ModelConfig, T: int, seed: int, tol32: float, tol64: float) -> list[Check]:
    out = []
    tokens = np.random.default_rng(1000 + seed).integers(0, cfg.vocab, T)
    for dtype, tol, suffix in ((np.float32, tol32, "32"), (np.float64, tol64, "64")):
        model = build_model(_reseed(cfg, seed), dtype=dtype)
        with tc.no_grad():
            y = {m: forward_lm(model, tokens, m)[0].data for m in MODES}
        out.append(Check(f"dense_vs_sparse_{suffix}", name, T, _maxdiff(y["dense"], y["sparse"]), tol))
        out.append(Check(f"dense_vs_batched_{suffix}", name, T, _maxdiff(y["dense"], y["batched"]), tol))
    return out


def _reseed(cfg: ModelConfig, seed: int) -> ModelConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def restricted_check(T: int, seed: int, tol: float) -> list[Check]:
    """Gathered-subset attention vs the key-masked full pass, and subset = all vs plain."""
    rng = np.random.default_rng(seed)
    q, k, v = (Tensor(rng.normal(size=(2, T, D_HEAD)).astype(np.float32)) for _ in range(3))
    subset = np.flatnonzero(rng.random(T) < 0.4)
    if subset.size == 0:
        subset = np.array([T - 1])
    mask = np.zeros(T, dtype=bool)
    mask[subset] = True
    with tc.no_grad():
        compact = restricted_attention(q, k, v, subset).data
        full = causal_attention(q, k, v, key_mask=mask).data[:, subset]
        every = restricted_attention(q, k, v, np.arange(T)).data
        plain = causal_attention(q, k, v).data
    return [Check("restricted_vs_masked_32", "attention", T, _maxdiff(compact, full), tol),
            Check("restricted_all_vs_full_32", "attention", T, _maxdiff(every, plain), 0.0)]


def delta_check(T: int, seed: int, tol64: float) -> Check:
    rng = np.random.default_rng(seed)
    p = DeltaParams(128, rng, std=0.2, dtype=np.float64)
    f = delta_features(Tensor(rng.normal(size=(T, 128))), p)
    with tc.no_grad():
        ref, _ = delta_recurrent(f)
        got, _ = delta_chunked(f, chunk=16)
    return Check("recurrent_vs_chunked_64", "delta", T, _maxdiff(ref.data, got.data), tol64)


def decode_check(name: str, cfg: ModelConfig, T: int, seed: int, tol64: float) -> Check:
    """Incremental decode logits vs full-forward logits at every position (64-bit)."""
    model = build_model(_reseed(cfg, seed), dtype=np.float64)
    tokens = np.random.default_rng(2000 + seed).integers(0, cfg.vocab, T)
    sess = DecodeSession(model)
    steps = np.stack([sess.step(int(t)) for t in tokens])
    with tc.no_grad():
        full = forward_lm(model, tokens, "sparse")[0].data
    return Check("decode_vs_full_64", name, T, _maxdiff(steps, full), tol64)


def equivalence_report(T_list=(16, 64, 255), seeds=(0, 1, 2), tol32: float = 1e-5, tol64: float = 1e-10,
                       configs: dict | None = None, decode_max_T: int = 64) -> list[Check]:
    configs = configs or ACCEPTANCE_CONFIGS
    checks: list[Check] = []
    for name, text in configs.items():
        cfg = ModelConfig.from_text(text)
        for T in T_list:
            for seed in seeds:
                checks += mode_checks(name, cfg, T, seed, tol32, tol64)
            if T <= decode_max_T:
                checks.append(decode_check(name, cfg, T, seeds[0], tol64))
    for T in T_list:
        for seed in seeds:
            checks += restricted_check(T, seed, tol32)
            checks.append(delta_check(T, seed, tol64))
    return checks
