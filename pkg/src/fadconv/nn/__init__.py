"""Minimal dense-tensor numerics with explicit forward/backward."""

from .functional import ConvGeometry, ShapeError, conv2d, conv2d_backward, loss
from .gradcheck import GradCheckResult, grad_check
from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    Module,
    Param,
    ReLU,
    Upsample2x,
    kaiming_normal,
    layer_rng,
)

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "ConvGeometry",
    "Dense",
    "GradCheckResult",
    "Module",
    "Param",
    "ReLU",
    "ShapeError",
    "Upsample2x",
    "conv2d",
    "conv2d_backward",
    "grad_check",
    "kaiming_normal",
    "layer_rng",
    "loss",
]
