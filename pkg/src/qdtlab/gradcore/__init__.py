"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .tensor import (
    ContractError,
    DimensionError,
    GradError,
    NumericError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    grad_enabled,
    no_grad,
)
from .ops import (
    add,
    concat,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    mse,
    permute,
    reshape,
    scale,
    softmax,
    sum,
    take,
    tanh,
    transpose,
    weighted_sum,
)
from .gradcheck import grad_check, numeric_grad

__all__ = [
    "ContractError", "DimensionError", "GradError", "NumericError", "Tape", "Tensor",
    "as_tensor", "backward", "grad_enabled", "no_grad",
    "add", "concat", "embedding", "gelu", "layer_norm", "linear", "matmul", "mse",
    "permute", "reshape", "scale", "softmax", "sum", "take", "tanh", "transpose",
    "weighted_sum", "grad_check", "numeric_grad",
]
