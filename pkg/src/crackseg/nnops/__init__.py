"""Differentiable numerical primitives with a reverse-mode gradient tape."""

from . import functional
from .functional import (
    bilinear_upsample,
    batch_norm,
    conv2d,
    depthwise_conv2d,
    gelu,
    layer_norm,
    relu,
    sigmoid,
    softmax,
)
from .gradcheck import GradCheckResult, check_gradients
from .kernels import BACKEND
from .module import BatchNorm2d, Conv2d, DepthwiseConv2d, LayerNorm, Module
from .tensor import GraphError, Parameter, Tensor, backward, no_grad

__all__ = [
    "BACKEND",
    "BatchNorm2d",
    "Conv2d",
    "DepthwiseConv2d",
    "GradCheckResult",
    "GraphError",
    "LayerNorm",
    "Module",
    "Parameter",
    "Tensor",
    "backward",
    "batch_norm",
    "bilinear_upsample",
    "check_gradients",
    "conv2d",
    "depthwise_conv2d",
    "functional",
    "gelu",
    "layer_norm",
    "no_grad",
    "relu",
    "sigmoid",
    "softmax",
]
