"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import functional
from .functional import MacCounter
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter, ReLU, Sequential, count_parameters
from .optim import Adam, clip_grad_norm, cosine_lr
from .tensor import Tape, Tensor, backward, default_dtype, get_default_dtype, no_grad, set_default_dtype

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "MacCounter",
    "Module",
    "Parameter",
    "ReLU",
    "Sequential",
    "Tape",
    "Tensor",
    "backward",
    "clip_grad_norm",
    "cosine_lr",
    "count_parameters",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "no_grad",
    "set_default_dtype",
]
