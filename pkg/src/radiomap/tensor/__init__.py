from .conv import conv2d, conv_output_size, conv_transpose2d
from .core import (
    DEFAULT_DTYPE,
    ShapeError,
    Tape,
    Tensor,
    abs_,
    active_tape,
    add,
    amax,
    as_tensor,
    backward,
    concat_channels,
    div,
    leaky_relu,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    sqrt,
    square,
    sub,
    sum_,
    tape_scope,
    transpose,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "DEFAULT_DTYPE",
    "Adam",
    "AdamState",
    "ShapeError",
    "Tape",
    "Tensor",
    "abs_",
    "active_tape",
    "adam_step",
    "add",
    "amax",
    "as_tensor",
    "backward",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "conv_transpose2d",
    "div",
    "leaky_relu",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softplus",
    "sqrt",
    "square",
    "sub",
    "sum_",
    "tape_scope",
    "transpose",
]
