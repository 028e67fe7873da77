"""Minimal dense tensors with reverse-mode differentiation."""

from . import ops
from .gradcheck import gradient_check
from .ops import (
    concat,
    conv2d,
    cross_entropy,
    exp,
    gather_bilinear,
    layer_norm,
    matmul,
    reduce_sum,
    scatter_add,
    silu,
    softmax,
    softplus,
)
from .tensor import Node, Tape, Tensor, as_tensor, backward, no_grad, parameter, record, strict

__all__ = [
    "Node",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "cross_entropy",
    "exp",
    "gather_bilinear",
    "gradient_check",
    "layer_norm",
    "matmul",
    "no_grad",
    "ops",
    "parameter",
    "record",
    "reduce_sum",
    "scatter_add",
    "silu",
    "softmax",
    "softplus",
    "strict",
]
