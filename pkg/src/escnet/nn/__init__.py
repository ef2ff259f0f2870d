"""Minimal NCHW tensor engine with reverse-mode differentiation."""
from . import functional
from .layers import (BatchNorm2d, Conv2d, DepthwiseSeparableConv2d, Linear, MaxPool2d, Module, ReLU,
                     Sequential)
from .tensor import (GraphError, ShapeError, Tensor, backward, default_dtype, no_grad, precision,
                     set_default_dtype)

__all__ = [
    "functional", "Tensor", "backward", "no_grad", "precision", "default_dtype", "set_default_dtype",
    "GraphError", "ShapeError", "Module", "Sequential", "Conv2d", "DepthwiseSeparableConv2d",
    "BatchNorm2d", "Linear", "ReLU", "MaxPool2d",
]
