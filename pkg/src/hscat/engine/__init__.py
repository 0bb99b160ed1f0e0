"""Minimal NHWC tensor library with reverse-mode autodiff."""

from . import ops
from .module import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module
from .ops import ShapeError
from .tensor import (NonFiniteError, Parameter, StaleTapeError, Tensor, as_tensor, backward,
                     grad_enabled, no_grad, tape)

__all__ = [
    "ops", "Module", "Linear", "Conv2d", "ConvTranspose2d", "LayerNorm",
    "Tensor", "Parameter", "ShapeError", "StaleTapeError", "NonFiniteError",
    "as_tensor", "backward", "no_grad", "grad_enabled", "tape",
]
