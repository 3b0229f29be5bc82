"""Small reverse-mode autodiff engine over numpy arrays."""
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BCE_CLAMP,
    ShapeError,
    add,
    add_scalars,
    batchnorm2d,
    bce_loss,
    concat_channels,
    conv2d,
    conv_transpose2d,
    l1_loss,
    leaky_relu,
    relu,
    scale,
    sigmoid,
    slice_channels,
    tanh,
    weighted_sum,
)
from .optim import Adam
from .rng import Rng
from .tensor import Tape, Tensor, backward, frozen, get_tape, is_grad_enabled, no_grad

__all__ = [
    "Adam", "BCE_CLAMP", "GradCheckReport", "Rng", "ShapeError", "Tape", "Tensor",
    "add", "add_scalars", "backward", "batchnorm2d", "bce_loss", "concat_channels", "conv2d",
    "conv_transpose2d", "frozen", "get_tape", "grad_check", "is_grad_enabled", "l1_loss",
    "leaky_relu", "no_grad", "relu", "scale", "sigmoid", "slice_channels", "tanh", "weighted_sum",
]
