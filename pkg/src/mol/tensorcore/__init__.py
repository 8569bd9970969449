"""Minimal dense tensors with reverse-mode automatic differentiation."""
from .gradcheck import gradcheck, numerical_grad, relative_error
from .ops import (
    add,
    cast,
    concat,
    cross_entropy_logits,
    cumsum,
    div,
    exp,
    gelu,
    getitem,
    index_add,
    l2_normalize,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    ones,
    power,
    reshape,
    rmsnorm,
    sigmoid,
    silu,
    softmax_lastdim,
    softplus,
    solve_unit_lower,
    sqrt,
    stack,
    sub,
    sum,
    swapaxes,
    take,
    tanh,
    transpose,
    zeros,
)
from .tensor import Tensor, as_tensor, backward, grad_enabled, make_node, no_grad, tensor, topo_order

__all__ = [name for name in dir() if not name.startswith("_")]
