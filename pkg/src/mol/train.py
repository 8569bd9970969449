"""Byte-level data pipeline, AdamW with warmup/cosine schedule, and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .config import ModelConfig
from .model import Model, build_model, forward_lm, save_checkpoint

log = logging.getLogger(__name__)


def tokenize_bytes(corpus: bytes | str) -> np.ndarray:
    if isinstance(corpus, str):
        corpus = corpus.encode("utf-8")
    return np.frombuffer(bytes(corpus), dtype=np.uint8).astype(np.intp)


class WindowSampler:
    """Seeded shuffled tiling of the corpus into ``[T+1]`` windows.

    Each epoch picks a random phase and visits every non-overlapping window
    once, so per-epoch coverage of any position is 0 or 1.
    """

    def __init__(self, tokens: np.ndarray, window: int, seed: int = 0):
        if len(tokens) < window + 1:
            raise ValueError(f"corpus of {len(tokens)} tokens is smaller than one window of {window + 1}")
        self.tokens = tokens
        self.window = window
        self.rng = np.random.default_rng(seed)
        self._queue: list[int] = []

    def epoch_starts(self) -> np.ndarray:
        span = self.window + 1
        slack = len(self.tokens) - span
        phase = int(self.rng.integers(0, min(self.window, slack) + 1))
        starts = np.arange(phase, len(self.tokens) - span + 1, self.window)
        return self.rng.permutation(starts)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._queue:
            self._queue = list(self.epoch_starts()[::-1])
        s = self._queue.pop()
        w = self.tokens[s : s + self.window + 1]
        return w[:-1], w[1:]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    warmup_steps: int = 1000
    lr_peak: float = 3e-4
    lr_floor_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_tokens: int = 64
    seq_len: int = 64
    aux_alpha: float = 0.05
    log_interval: int = 10
    seed: int = 0
    mode: str = "dense"
    eps: float = 1e-8

    @property
    def accum(self) -> int:
        return max(1, self.batch_tokens // self.seq_len)

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, value in overrides.items():
            if key not in types:
                raise ValueError(f"unknown training key {key!r}")
            typ = types[key] if isinstance(types[key], str) else types[key].__name__
            parsed[key] = int(value) if typ == "int" else float(value) if typ == "float" else value
        return replace(self, **parsed)


def split_config_text(text: str) -> tuple[str, dict[str, str]]:
    """Separate ``train.<key> = value`` lines from the model config text."""
    model_lines, train = [], {}
    for line in text.splitlines():
        body = line.split("#", 1)[0].strip()
        if body.startswith("train."):
            key, _, value = body[6:].partition("=")
            train[key.strip()] = value.strip()
        else:
            model_lines.append(line)
    return "\n".join(model_lines) + "\n", train


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine down to ``lr_floor_ratio * lr_peak`` at ``steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    floor = cfg.lr_floor_ratio * cfg.lr_peak
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return floor + 0.5 * (cfg.lr_peak - floor) * (1.0 + math.cos(math.pi * progress))


def clip_grads(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def no_decay(name: str) -> bool:
    """Routing and gating parameters are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith(("w_router", "moe_router", "se_"))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: AdamState, lr: float, cfg: TrainConfig, decay_mask=None) -> bool:
    """Clip, then one bias-corrected AdamW update. Returns False (and skips) on non-finite grads."""
    if not all(np.isfinite(g).all() for g in grads):
        log.warning("non-finite gradient at update %d; step skipped", state.t + 1)
        return False
    if cfg.clip_norm > 0:
        clip_grads(grads, cfg.clip_norm)
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if decay_mask is None or decay_mask[i]:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)
    return True


@dataclass
class TrainResult:
    model: Model
    rows: list[dict]
    skipped: int
    finite: bool = True  # every step's CE and aux were finite


def _log_header(model: Model) -> list[str]:
    n = sum(s.spec.n_routed for s in model.stages)
    return ["step", "lr", "ce", "aux"] + [f"load_{i}" for i in range(n)] + ["tok_per_s"]


def train(model_cfg: ModelConfig, cfg: TrainConfig, corpus, out_dir=None, model: Model | None = None) -> TrainResult:
    """Loss is ``CE + aux_alpha * sum_stage CV^2``, accumulated over ``cfg.accum`` sequences per step.

    Rows are written to ``out_dir/log.csv`` as they are produced and the
    final weights to ``out_dir/final.ckpt``.
    """
    tokens = tokenize_bytes(corpus) if not isinstance(corpus, np.ndarray) else corpus
    sampler = WindowSampler(tokens, cfg.seq_len, cfg.seed)
    model = model or build_model(model_cfg)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    decay_mask = [not no_decay(n) for n, _ in named]
    state = AdamState.like(params)
    header = _log_header(model)
    rows: list[dict] = []
    skipped = 0
    finite = True
    out = Path(out_dir) if out_dir is not None else None
    fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
    try:
        t_interval = time.perf_counter()
        tok_interval = 0
        loads: list[np.ndarray] = []
        ce_hist: list[float] = []
        aux_hist: list[float] = []
        for step in range(1, cfg.steps + 1):
            lr = lr_at(step, cfg)
            model.zero_grad()
            ce_sum = aux_sum = 0.0
            for _ in range(cfg.accum):
                x, y = sampler.next()
                logits, aux, decisions = forward_lm(model, x, cfg.mode, return_decisions=True)
                ce = tc.cross_entropy_logits(logits, y)
                loss = (ce + aux * cfg.aux_alpha) * (1.0 / cfg.accum)
                loss.backward()
                ce_sum += ce.item()
                aux_sum += aux.item()
                finite = finite and np.isfinite(ce.item()) and np.isfinite(aux.item())
                loads.append(np.concatenate([d.load_fractions() for d in decisions]) if decisions else np.zeros(0))
                tok_interval += len(x)
            ce_hist.append(ce_sum / cfg.accum)
            aux_hist.append(aux_sum / cfg.accum)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            if not adamw_step(params, grads, state, lr, cfg, decay_mask):
                skipped += 1
            if step % cfg.log_interval == 0 or step == cfg.steps or step == 1:
                now = time.perf_counter()
                # losses and loads are averaged over every step since the last row
                row = {"step": step, "lr": lr, "ce": float(np.mean(ce_hist)), "aux": float(np.mean(aux_hist))}
                for i, f in enumerate(np.mean(loads, axis=0)):
                    row[f"load_{i}"] = float(f)
                row["tok_per_s"] = tok_interval / max(now - t_interval, 1e-9)
                t_interval, tok_interval, loads, ce_hist, aux_hist = now, 0, [], [], []
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
        if out is not None:
            save_checkpoint(model, out / "final.ckpt")
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, rows, skipped, finite)


_SYLLABLES = ["ka", "to", "ri", "en", "sa", "lo", "mi", "th", "er", "an", "de", "qu", "is", "on", "ve", "ul"]


def synthetic_corpus(n_bytes: int = 1 << 20, seed: int = 0, n_words: int = 2000) -> bytes:
    """Seeded word-level text with a Zipfian vocabulary, spaces, punctuation and line breaks."""
    rng = np.random.default_rng(seed)
    words = []
    for _ in range(n_words):
        k = int(rng.integers(1, 5))
        words.append("".join(rng.choice(_SYLLABLES, size=k)))
    ranks = np.arange(1, n_words + 1)
    probs = 1.0 / ranks
    probs /= probs.sum()
    out: list[str] = []
    size = 0
    while size < n_bytes:
        n = int(rng.integers(4, 16))
        sentence = " ".join(words[i] for i in rng.choice(n_words, size=n, p=probs))
        sentence = sentence[0].upper() + sentence[1:] + (". " if rng.random() < 0.85 else ".\n")
        out.append(sentence)
        size += len(sentence)
    return "".join(out).encode("ascii")[:n_bytes]
