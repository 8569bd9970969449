"""Parameter containers and initialisers."""
from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy import stats

from .tensorcore import Tensor


class Module:
    """Attribute-based parameter tree.

    Any attribute holding a ``Tensor`` with ``requires_grad`` is a
    parameter; attributes holding a ``Module`` or a list of them are walked
    recursively with dotted names.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for 64-bit equivalence runs)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> Tensor:
    """Normal(0, std) truncated at two standard deviations."""
    n = int(np.prod(shape)) if shape else 1
    vals = stats.truncnorm.rvs(-2.0, 2.0, size=n, random_state=rng) * std
    return Tensor(vals.reshape(shape).astype(dtype), requires_grad=True)


def constant(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def stack_modules(mods: list[Module]) -> Module:
    """Same-typed modules fused along a new leading block axis.

    Parameters become differentiable stacks (gradients flow back to each
    source module); non-tensor attributes are copied from the first module.
    """
    from .tensorcore import stack

    first = mods[0]
    out = object.__new__(type(first))
    for name, value in vars(first).items():
        if isinstance(value, Tensor) and value.requires_grad:
            setattr(out, name, stack([getattr(m, name) for m in mods], axis=0))
        elif isinstance(value, Module):
            setattr(out, name, stack_modules([getattr(m, name) for m in mods]))
        else:
            setattr(out, name, value)
    return out
