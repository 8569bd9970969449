"""Multiply-accumulate tallies used as a hardware-independent cost model."""
from __future__ import annotations

from collections import Counter


class MacCounter(Counter):
    """Per-component integer MAC tally; ``total`` sums every component."""

    def add(self, component: str, macs: int) -> None:
        self[component] += int(macs)

    @property
    def total(self) -> int:
        return int(sum(self.values()))

    def matching(self, prefix: str) -> int:
        return int(sum(v for k, v in self.items() if k.startswith(prefix)))
