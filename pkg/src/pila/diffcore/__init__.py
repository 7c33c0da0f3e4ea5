"""Minimal dense-array math with reverse-mode gradient accumulation."""

from .numdiff import NonFiniteEvaluationError, finite_difference
from .optim import Adam, stabilize_gradients
from .tensor import (
    NonScalarLossError,
    ShapeError,
    Tensor,
    add,
    arctan,
    as_tensor,
    backward,
    clamp,
    concat_last,
    detach,
    div,
    exp,
    log,
    matmul,
    mean,
    mul,
    outer,
    power,
    sigmoid,
    slice_last,
    softplus,
    sqrt,
    square,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "Adam",
    "NonFiniteEvaluationError",
    "NonScalarLossError",
    "ShapeError",
    "Tensor",
    "add",
    "arctan",
    "as_tensor",
    "backward",
    "clamp",
    "concat_last",
    "detach",
    "div",
    "exp",
    "finite_difference",
    "log",
    "matmul",
    "mean",
    "mul",
    "outer",
    "power",
    "sigmoid",
    "slice_last",
    "softplus",
    "sqrt",
    "square",
    "stabilize_gradients",
    "sub",
    "tanh",
    "transpose",
    "tsum",
]
