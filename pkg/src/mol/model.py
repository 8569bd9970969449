"""Language-model assembly, parameter accounting and checkpoint I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .attention import D_HEAD, shared_rope
from .config import ModelConfig
from .nn import Module, constant, trunc_normal
from .router import se_gate_param_count
from .stage import NORM_EPS, Block, SplitStage, StageSpec
from .tensorcore import Tensor

INIT_STD = 0.02
MAGIC = b"MOL1"


class DenseLayer(Module):
    """Full-width block with its residual: ``x + Block(x) - x``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, out_std: float, dtype=np.float32):
        self.block = Block(cfg.d_model, cfg.dense_attn, "dense", cfg.dense_d_ff, rng, out_std, dtype=dtype)

    def __call__(self, x: Tensor, table, mode: str = "dense", chunk: int = 64):
        return x + self.block.delta(x, np.arange(x.shape[0]), table, chunk=chunk), None, None


class Model(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        out_std = INIT_STD / math.sqrt(2 * cfg.n_layers)
        self.embed = trunc_normal(rng, (cfg.vocab, cfg.d_model), INIT_STD, dtype)
        self.layers = [
            DenseLayer(cfg, rng, out_std, dtype) if spec is None else SplitStage(cfg.d_model, spec, rng, INIT_STD, out_std, dtype)
            for spec in cfg.stages
        ]
        self.final_norm = constant((cfg.d_model,), 1.0, dtype)
        self.head = trunc_normal(rng, (cfg.vocab, cfg.d_model), INIT_STD, dtype)

    @property
    def stages(self) -> list[SplitStage]:
        return [layer for layer in self.layers if isinstance(layer, SplitStage)]


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    """Deterministic in ``cfg.seed``."""
    cfg.validate()
    return Model(cfg, dtype)


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if tokens.size > cfg.t_max:
        raise ValueError(f"sequence length {tokens.size} exceeds t_max={cfg.t_max}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token id outside [0, {cfg.vocab})")
    return tokens


def forward_lm(model: Model, tokens, mode: str = "dense", return_decisions: bool = False):
    """``embed -> layers -> norm -> head``; returns ``(logits [T, vocab], aux)``.

    ``aux`` is the sum of the split stages' CV^2 losses. With
    ``return_decisions`` the per-stage routing decisions are appended.
    """
    cfg = model.cfg
    tokens = check_tokens(tokens, cfg)
    table = shared_rope(cfg.t_max)
    x = tc.take(model.embed, tokens, 0)
    aux = Tensor(np.zeros((), dtype=x.dtype))
    decisions = []
    for layer in model.layers:
        x, stage_aux, decision = layer(x, table, mode, cfg.chunk)
        if stage_aux is not None:
            aux = aux + stage_aux
            decisions.append(decision)
    logits = tc.linear(tc.rmsnorm(x, model.final_norm, NORM_EPS), model.head)
    if return_decisions:
        return logits, aux, decisions
    return logits, aux


# ---------------------------------------------------------------- accounting


def attention_params(d: int, kind: str) -> int:
    if kind == "softmax":
        return 4 * d * d
    heads = d // D_HEAD
    # q/k/v/o maps, three width-4 convs with bias, beta/alpha maps, decay rates
    return 4 * d * d + 15 * d + 2 * heads * d + heads


def ffn_params(d: int, spec: StageSpec | None = None, d_ff: int = 0) -> int:
    if spec is not None and spec.ffn == "rank1-moe":
        return 3 * spec.moe_experts * d
    return 2 * d * (d_ff or (spec.ff if spec else 4 * d))


def wrapper_fraction(d_model: int, d_thin: int, attn: str = "softmax", ffn_d_ff: int = 0) -> float:
    """Share of a thin block's weights spent on the down/up projections (norms excluded)."""
    proj = 2 * d_model * d_thin
    inner = attention_params(d_thin, attn) + 2 * d_thin * (ffn_d_ff or 4 * d_thin)
    return proj / (proj + inner)


@dataclass
class ParamReport:
    components: dict = field(default_factory=dict)
    total: int = 0
    active: int = 0
    wrapper_fraction: float | None = None

    def lines(self) -> list[str]:
        out = [f"{k},{v}" for k, v in self.components.items()]
        out += [f"total,{self.total}", f"active,{self.active}"]
        if self.wrapper_fraction is not None:
            out.append(f"wrapper_fraction,{self.wrapper_fraction:.4f}")
        return out


def count_params(cfg: ModelConfig) -> ParamReport:
    """Exact analytic counts per component, plus parameters touched by one token."""
    d = cfg.d_model
    comp: dict[str, int] = {"embeddings": cfg.vocab * d, "head": cfg.vocab * d, "final_norm": d}
    active = sum(comp.values())
    fraction = None
    for i, spec in enumerate(cfg.stages):
        tag = f"layer{i}"
        if spec is None:
            parts = {
                "attention": attention_params(d, cfg.dense_attn),
                "ffn": ffn_params(d, d_ff=cfg.dense_d_ff),
                "norms": 2 * d,
            }
            for k, v in parts.items():
                comp[f"{tag}.{k}"] = v
            active += sum(parts.values())
            continue
        dt = spec.d_thin
        per_attn = [attention_params(dt, spec.shared_attn if b < spec.shared else spec.routed_attn) for b in range(spec.n_blocks)]
        per_ffn = ffn_params(dt, spec)
        per_proj = 2 * d * dt
        per_norm = 2 * dt
        parts = {
            "projections": per_proj * spec.n_blocks,
            "attention": sum(per_attn),
            "ffn": per_ffn * spec.n_blocks,
            "norms": per_norm * spec.n_blocks,
            "router": spec.n_routed * d,
        }
        if spec.se_gating:
            parts["se_gate"] = se_gate_param_count(spec.k)
        for k, v in parts.items():
            comp[f"{tag}.{k}"] = v
        touched = spec.shared * (per_attn[0] if spec.shared else 0)
        touched += spec.k * per_attn[-1]
        touched += (spec.shared + spec.k) * (per_ffn + per_proj + per_norm)
        active += touched + parts["router"] + parts.get("se_gate", 0)
        if fraction is None:
            fraction = wrapper_fraction(d, dt, spec.shared_attn if spec.shared else spec.routed_attn, spec.ff if spec.ffn == "dense" else 0)
    return ParamReport(comp, sum(comp.values()), active, fraction)


def touched_parameters(model: Model, token: int = 0) -> int:
    """Brute-force count: parameter arrays reachable from one token's logits (sparse dispatch)."""
    logits, _ = forward_lm(model, [token], mode="sparse")
    params = {id(p) for p in model.parameters()}
    return sum(n.size for n in tc.topo_order(logits) if id(n) in params)


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    """``MOL1``, config text, then ``(name, rank, extents, float32 data)`` records; little-endian."""
    cfg = model.cfg.to_text().encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(cfg)), cfg]
    for name, p in model.named_parameters():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f4")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", data.ndim)]
        chunks += [struct.pack(f"<{data.ndim}I", *data.shape), data.tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at offset {self.pos} while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[ModelConfig, list[tuple[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    n = r.u32("config length")
    at = r.pos
    try:
        cfg = ModelConfig.from_text(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"unreadable config at offset {at}: {err}") from None
    records = []
    while r.pos < len(r.buf):
        at = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupt array name at offset {at}") from None
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name} at offset {at}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape)
        records.append((name, data.astype(np.float32)))
    return cfg, records


def load_state(model: Model, records) -> Model:
    """Copy records into ``model``; the first missing, extra or mis-shaped array is named."""
    own = list(model.named_parameters())
    theirs = dict(records)
    for name, p in own:
        if name not in theirs:
            raise CheckpointError(f"array {name} missing from checkpoint")
        if theirs[name].shape != p.shape:
            raise CheckpointError(f"array {name}: checkpoint shape {theirs[name].shape} vs model {p.shape}")
    extra = [n for n, _ in records if n not in dict(own)]
    if extra:
        raise CheckpointError(f"array {extra[0]} not present in model")
    for name, p in own:
        p.data = theirs[name].astype(p.dtype).copy()
    return model


def load_checkpoint(path, model: Model | None = None) -> Model:
    cfg, records = read_checkpoint(path)
    if model is None:
        model = build_model(cfg)
    return load_state(model, records)
