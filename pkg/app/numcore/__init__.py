"""Tensor numerics with reverse-mode autodiff and the layers the enhancement models use."""

from app.numcore.tensor import (
    Tensor,
    as_tensor,
    concat,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
    stop_gradient,
)
from app.numcore.module import (
    BatchNorm,
    Dense,
    DepthwiseConv1d,
    Dropout,
    InstanceNorm,
    LayerNorm,
    Module,
    Parameter,
    ParamFactory,
    PReLU,
    Scale,
)

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "set_default_dtype",
    "stop_gradient",
    "BatchNorm",
    "Dense",
    "DepthwiseConv1d",
    "Dropout",
    "InstanceNorm",
    "LayerNorm",
    "Module",
    "Parameter",
    "ParamFactory",
    "PReLU",
    "Scale",
]
