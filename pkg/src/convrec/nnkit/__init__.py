"""A minimal float64 neural-network kit: layers, Adam, gradient checking, checkpoints."""

from .checkpoint import load_checkpoint, load_sequential, save_checkpoint, save_sequential
from .gradcheck import check_gradient, max_relative_error, numeric_gradient
from .layers import (
    Concat,
    ConfigurationError,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    ReLU,
    Reshape,
    ResidualBlock,
    Sequential,
    layer_from_spec,
)
from .optim import Adam, NonFiniteGradientError, cosine_lr

__all__ = [
    "Adam",
    "Concat",
    "ConfigurationError",
    "Conv2d",
    "Dense",
    "Dropout",
    "Flatten",
    "NonFiniteGradientError",
    "ReLU",
    "Reshape",
    "ResidualBlock",
    "Sequential",
    "check_gradient",
    "cosine_lr",
    "layer_from_spec",
    "load_checkpoint",
    "load_sequential",
    "max_relative_error",
    "numeric_gradient",
    "save_checkpoint",
    "save_sequential",
]
