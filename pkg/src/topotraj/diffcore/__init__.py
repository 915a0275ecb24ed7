"""A small reverse-mode differentiation engine over numpy arrays."""

from .array import (
    ConfigError,
    DiffArray,
    ShapeError,
    StateError,
    default_dtype,
    no_grad,
    precision,
    set_debug,
    set_default_dtype,
)
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .nn import (
    Conv2d,
    DepthwiseConv2d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    ResidualBlock,
)
from .optim import Parameter, adam_step, clip_grad_norm, grad_norm, zero_grad
from . import ops

__all__ = [
    "ConfigError", "DiffArray", "ShapeError", "StateError", "default_dtype", "no_grad", "precision",
    "set_debug", "set_default_dtype", "load_checkpoint", "read_manifest", "save_checkpoint",
    "Conv2d", "DepthwiseConv2d", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "ResidualBlock", "Parameter", "adam_step", "clip_grad_norm",
    "grad_norm", "zero_grad", "ops",
]
