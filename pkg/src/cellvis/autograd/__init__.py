"""Minimal reverse-mode tensor engine used by the predictor and learned baselines."""
from .gradcheck import GradCheckReport, gradient_check, numeric_gradient
from .nn import MLP, GRUCell, Linear, LSTMCell, Module, glorot
from .optim import Adam, OptimizerStateError
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    default_dtype,
    exp,
    get_default_dtype,
    guard_denominator,
    mse_loss,
    relu,
    set_debug,
    set_default_dtype,
    sigmoid,
    softmax,
    stack,
    take,
    tanh,
    tensor,
    where,
)

__all__ = [
    "Adam", "GRUCell", "GradCheckReport", "LSTMCell", "Linear", "MLP", "Module",
    "OptimizerStateError", "ShapeError", "Tape", "Tensor", "as_tensor", "backward",
    "concat", "default_dtype", "exp", "get_default_dtype", "glorot", "gradient_check",
    "guard_denominator", "mse_loss", "numeric_gradient", "relu", "set_debug",
    "set_default_dtype", "sigmoid", "softmax", "stack", "take", "tanh", "tensor", "where",
]
