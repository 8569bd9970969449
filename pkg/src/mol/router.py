"""Top-k block routing, CV^2 load balancing and SE activation gating."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .nn import Module, constant, trunc_normal
from .tensorcore import Tensor


@dataclass(frozen=True)
class RoutingDecision:
    logits: Tensor  # [T, N]
    weights: Tensor  # softmax over all N
    selected: np.ndarray  # [T, k], best first
    load: Tensor  # [N], column sums of ``weights``
    gates: Tensor  # [T, N], selected weights, zero elsewhere

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.weights.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=1)
        return m

    def tokens_for(self, block: int) -> np.ndarray:
        """Ascending token positions routed to ``block``."""
        return np.flatnonzero((self.selected == block).any(axis=1))

    def load_fractions(self) -> np.ndarray:
        """Share of the softmax routing mass per block (the quantity CV^2 balances)."""
        load = self.load.data.astype(np.float64)
        return load / max(load.sum(), 1e-12)

    def assignment_fractions(self) -> np.ndarray:
        """Share of top-k token assignments per block."""
        counts = np.bincount(self.selected.ravel(), minlength=self.weights.shape[-1])
        return counts / max(self.selected.size, 1)


def topk_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    return np.argsort(-weights, axis=-1, kind="stable")[..., :k]


def route_topk(logits: Tensor, k: int, renormalize: bool = False) -> RoutingDecision:
    """Softmax over every candidate, then keep the ``k`` best.

    Selected weights are *not* renormalised by default (the stage applies
    its own ``1/k``). Gradient reaches the router only through the selected
    weights and through ``load``.
    """
    N = logits.shape[-1]
    if not 1 <= k <= N:
        raise ValueError(f"top-k needs 1 <= k <= {N}, got k={k}")
    weights = tc.softmax_lastdim(logits)
    selected = topk_indices(weights.data, k)
    mask = np.zeros(weights.shape, dtype=weights.dtype)
    np.put_along_axis(mask, selected, 1.0, axis=-1)
    gates = weights * mask
    if renormalize:
        gates = gates / tc.sum(gates, axis=-1, keepdims=True)
    load = tc.sum(weights, axis=0)
    return RoutingDecision(logits, weights, selected, load, gates)


def cv2_loss(load: Tensor) -> Tensor:
    """Squared coefficient of variation ``var(load) / mean(load)^2`` (population variance)."""
    n = load.shape[-1]
    if n < 1:
        raise ValueError("cv2_loss needs at least one block")
    if np.any(load.data < 0):
        raise ValueError("cv2_loss: negative load")
    if not np.any(load.data):
        warnings.warn("cv2_loss: all-zero load (degenerate batch), returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=load.dtype))
    mean = tc.mean(load)
    dev = load - tc.reshape(mean, (1,))
    return tc.mean(dev * dev) / (mean * mean)


class Router(Module):
    """Bias-free linear map from the stage input to one logit per routed block."""

    def __init__(self, d_model: int, n_routed: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        self.w_router = trunc_normal(rng, (n_routed, d_model), std, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.w_router)


SE_HIDDEN = 4


def se_gate_param_count(k_active: int, hidden: int = SE_HIDDEN) -> int:
    """Weights and biases of a ``k -> hidden -> k`` MLP.

    With 12 active experts per layer and 8 layers this is 8 * 112 = 896.
    """
    return 2 * k_active * hidden + hidden + k_active


class SEGate(Module):
    def __init__(self, k_active: int, rng: np.random.Generator, hidden: int = SE_HIDDEN, std: float = 0.02, dtype=np.float32):
        self.se_w1 = trunc_normal(rng, (hidden, k_active), std, dtype)
        self.se_b1 = constant((hidden,), 0.0, dtype)
        self.se_w2 = trunc_normal(rng, (k_active, hidden), std, dtype)
        self.se_b2 = constant((k_active,), 0.0, dtype)

    def __call__(self, mags: Tensor) -> Tensor:
        return se_gate(mags, self)


def se_gate(mags: Tensor, p: SEGate) -> Tensor:
    """``sigmoid(W2 silu(W1 m + b1) + b2)`` per token, in (0, 1)."""
    h = tc.silu(tc.linear(mags, p.se_w1) + tc.reshape(p.se_b1, (1, -1)))
    return tc.sigmoid(tc.linear(h, p.se_w2) + tc.reshape(p.se_b2, (1, -1)))
