"""Model configuration and its flat ``key = value`` text form."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from .attention import D_HEAD
from .deltanet import DEFAULT_CHUNK
from .stage import ATTN_TYPES, StageSpec

_SCALARS = ("vocab", "d_model", "n_heads", "n_layers", "t_max", "dense_d_ff", "dense_attn", "seed", "chunk")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; ``stages[i] is None`` marks a dense layer."""

    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 0  # 0 means d_model / 64
    vocab: int = 256
    t_max: int = 512
    stages: tuple = ()
    dense_d_ff: int = 0  # 0 means 4 * d_model
    dense_attn: str = "softmax"
    seed: int = 0
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.n_heads == 0:
            object.__setattr__(self, "n_heads", self.d_model // D_HEAD)
        if self.dense_d_ff == 0:
            object.__setattr__(self, "dense_d_ff", 4 * self.d_model)
        stages = tuple(self.stages) + (None,) * (self.n_layers - len(self.stages))
        object.__setattr__(self, "stages", stages)
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ValueError(f"config field {name}: {why}")

        if self.d_model <= 0 or self.d_model % D_HEAD:
            bad("d_model", f"must be a positive multiple of {D_HEAD}")
        if self.n_heads * D_HEAD != self.d_model:
            bad("n_heads", f"d_model must equal n_heads * {D_HEAD}")
        if self.n_layers < 1:
            bad("n_layers", "need at least one layer")
        if len(self.stages) != self.n_layers:
            bad("stages", f"{len(self.stages)} entries for {self.n_layers} layers")
        if self.vocab < 2:
            bad("vocab", "need at least two symbols")
        if self.t_max < 1:
            bad("t_max", "must be positive")
        if self.dense_d_ff < 1:
            bad("dense_d_ff", "must be positive")
        if self.dense_attn not in ATTN_TYPES:
            bad("dense_attn", f"must be one of {ATTN_TYPES}")
        if self.chunk < 1:
            bad("chunk", "must be positive")
        for i, s in enumerate(self.stages):
            if s is not None and s.d_thin >= self.d_model:
                bad(f"stage.{i}", "d_thin must be below d_model")

    @property
    def has_routing(self) -> bool:
        return any(s is not None for s in self.stages)

    def to_text(self) -> str:
        lines = [f"{name} = {getattr(self, name)}" for name in _SCALARS]
        for i, s in enumerate(self.stages):
            lines.append(f"stage.{i} = {'dense' if s is None else s.to_text()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs: dict = {}
        stages: dict[int, StageSpec | None] = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            if key.startswith("stage."):
                try:
                    idx = int(key[6:])
                except ValueError:
                    raise ValueError(f"line {lineno}: bad stage key {key!r}") from None
                stages[idx] = None if value == "dense" else StageSpec.parse(value)
            elif key in _SCALARS:
                kwargs[key] = value if types[key] in ("str", str) else int(value)
            else:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
        n_layers = kwargs.get("n_layers", cls.n_layers)
        if stages and max(stages) >= n_layers:
            raise ValueError(f"config field stages: stage.{max(stages)} but n_layers = {n_layers}")
        kwargs["stages"] = tuple(stages.get(i) for i in range(n_layers))
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())
