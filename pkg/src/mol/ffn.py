"""Feed-forward variants for thin blocks: dense GELU MLP and rank-1 expert mixture."""
from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .nn import Module, trunc_normal
from .router import topk_indices
from .tensorcore import Tensor


class DenseFFN(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, std: float = 0.02, out_std: float | None = None, dtype=np.float32):
        self.w1 = trunc_normal(rng, (d_ff, d), std, dtype)
        self.w2 = trunc_normal(rng, (d, d_ff), out_std if out_std is not None else std, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return ffn_dense(h, self.w1, self.w2)


def ffn_dense(h: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """``W2 GELU(W1 h)`` per position, no biases."""
    return tc.linear(tc.gelu(tc.linear(h, w1)), w2)


class Rank1MoE(Module):
    """``n_experts`` outer-product units; ``k_active`` fire per token."""

    def __init__(self, d: int, n_experts: int, k_active: int, rng: np.random.Generator, std: float = 0.02, out_std: float | None = None, dtype=np.float32):
        if not 1 <= k_active <= n_experts:
            raise ValueError(f"rank-1 MoE needs 1 <= k_active <= n_experts, got {k_active} of {n_experts}")
        self.k_active = k_active
        self.moe_router = trunc_normal(rng, (n_experts, d), std, dtype)
        self.moe_in = trunc_normal(rng, (n_experts, d), std, dtype)
        self.moe_out = trunc_normal(rng, (n_experts, d), out_std if out_std is not None else std, dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return ffn_rank1_moe(h, self.moe_router, self.moe_in, self.moe_out, self.k_active)


def ffn_rank1_moe(h: Tensor, router: Tensor, w_in: Tensor, u_out: Tensor, k_active: int) -> Tensor:
    """``sum_{i in top-k} g_i * u_i * GELU(w_i . h)`` with ``g`` the softmax router weights.

    Expert tensors are ``[..., N_e, d]``; a leading block axis may be present.
    """
    n = w_in.shape[-2]
    if not 1 <= k_active <= n:
        raise ValueError(f"k_active={k_active} outside [1, {n}]")
    weights = tc.softmax_lastdim(tc.linear(h, router))
    mask = np.zeros(weights.shape, dtype=weights.dtype)
    np.put_along_axis(mask, topk_indices(weights.data, k_active), 1.0, axis=-1)
    act = tc.gelu(tc.linear(h, w_in))
    return tc.matmul(weights * mask * act, u_out)
