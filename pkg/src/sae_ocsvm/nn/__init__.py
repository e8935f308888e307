"""Minimal differentiable tensor engine for the patch auto-encoder."""
from .autodiff import Tensor, backprop, concat, row_cosine, square
from .gradcheck import grad_check
from .layers import (
    BatchNormState,
    ConvLayer,
    activation,
    batch_norm,
    conv2d,
    conv_output_size,
    gelu,
    sigmoid,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "BatchNormState",
    "ConvLayer",
    "Tensor",
    "activation",
    "adam_step",
    "backprop",
    "batch_norm",
    "concat",
    "conv2d",
    "conv_output_size",
    "gelu",
    "grad_check",
    "row_cosine",
    "sigmoid",
    "square",
]
