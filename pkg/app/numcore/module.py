"""Parameters, the Module tree and the layer classes built on the functional ops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.numcore import functional as F
from app.numcore.tensor import Tensor, get_default_dtype
from app.utils.helper import CheckpointError, DimensionError


@dataclass
class Parameter:
    """A trainable tensor with a unique dotted path and an optional EMA shadow."""
    name: str
    tensor: Tensor
    ema_shadow: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def size(self) -> int:
        return self.tensor.size


class ParamFactory:
    """Creates parameter tensors; with `rng=None` only shapes are produced (zeros)."""

    def __init__(self, rng: Optional[np.random.Generator], dtype=None):
        self.rng = rng
        self.dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()

    @property
    def shape_only(self) -> bool:
        return self.rng is None

    def _make(self, name: str, values: np.ndarray) -> Parameter:
        return Parameter(name=name, tensor=Tensor(values.astype(self.dtype, copy=False), requires_grad=True))

    def uniform(self, name: str, shape: Tuple[int, ...], bound: float) -> Parameter:
        if self.shape_only:
            return self._make(name, np.broadcast_to(np.zeros((), dtype=self.dtype), shape))
        return self._make(name, self.rng.uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape: Tuple[int, ...], value: float) -> Parameter:
        return self._make(name, np.full(shape, value, dtype=self.dtype))

    def child_rng(self) -> Optional[np.random.Generator]:
        if self.rng is None:
            return None
        return np.random.default_rng(self.rng.integers(0, 2**63 - 1))


class Module:
    """Tree of parameters, buffers and sub-modules discovered from attributes.

    Parameter paths follow attribute names (lists contribute their index), so
    `blocks.3.conv.kernel` is unique within a model.
    """

    training: bool = True

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
        for key, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for path, param in self.named_parameters():
            param.name = path

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        """Non-trainable state (running statistics, random feature maps)."""
        for key, value in self.buffers().items():
            yield f"{prefix}{key}", value
        for key, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def load_buffer(self, key: str, value: np.ndarray) -> None:
        raise CheckpointError(f"{type(self).__name__} has no buffer '{key}'")

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"Parameter names differ: missing={missing[:5]}, unexpected={unexpected[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"Shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.tensor.data = value.astype(p.tensor.dtype, copy=True)

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, child in self.named_children():
            yield from child.named_modules(f"{prefix}{key}.")

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        modules = dict(self.named_modules())
        for path, value in buffers.items():
            owner, _, key = path.rpartition(".")
            if owner not in modules:
                raise CheckpointError(f"Unknown buffer path {path}")
            modules[owner].load_buffer(key, np.array(value, copy=True))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


# ---------- layers ----------

class Dense(Module):
    def __init__(self, factory: ParamFactory, d_in: int, d_out: int, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = factory.uniform("weight", (d_in, d_out), bound)
        self.bias = factory.uniform("bias", (d_out,), bound) if bias else None

    def forward(self, z):
        return F.dense(z, self.weight, self.bias)


class DepthwiseConv1d(Module):
    def __init__(self, factory: ParamFactory, kernel_size: int, channels: int, bias: bool = True):
        if kernel_size % 2 == 0:
            raise ValueError(f"Depthwise kernel size must be odd, got {kernel_size}")
        bound = 1.0 / np.sqrt(kernel_size)
        self.kernel_size = kernel_size
        self.kernel = factory.uniform("kernel", (kernel_size, channels), bound)
        self.bias = factory.uniform("bias", (channels,), bound) if bias else None

    def receptive_field(self, dilation: int) -> int:
        return F.receptive_field(self.kernel_size, dilation)

    def forward(self, z, dilation: int = 1):
        return F.depthwise_conv1d(z, self.kernel, dilation=dilation, bias=self.bias)


class _AffineNorm(Module):
    def __init__(self, factory: ParamFactory, channels: int):
        self.gamma = factory.constant("gamma", (channels,), 1.0)
        self.beta = factory.constant("beta", (channels,), 0.0)


class InstanceNorm(_AffineNorm):
    def forward(self, z):
        return F.instance_norm(z, self.gamma, self.beta)


class LayerNorm(_AffineNorm):
    def forward(self, z):
        return F.layer_norm(z, self.gamma, self.beta)


class BatchNorm(_AffineNorm):
    """Batch norm whose running stats start at (0, 1) so fresh models can run in eval mode."""

    def __init__(self, factory: ParamFactory, channels: int, momentum: float = 0.99):
        super().__init__(factory, channels)
        self.stats = F.RunningStats(
            mean=np.zeros(channels, dtype=factory.dtype),
            var=np.ones(channels, dtype=factory.dtype),
            momentum=momentum,
        )

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}

    def load_buffer(self, key: str, value: np.ndarray) -> None:
        if key == "running_mean":
            self.stats.mean = np.asarray(value, dtype=self.gamma.tensor.dtype)
        elif key == "running_var":
            self.stats.var = np.asarray(value, dtype=self.gamma.tensor.dtype)
        else:
            super().load_buffer(key, value)

    def forward(self, z):
        return F.batch_norm(z, self.gamma, self.beta, self.stats, training=self.training)


class PReLU(Module):
    def __init__(self, factory: ParamFactory, channels: int, init: float = 0.25):
        self.slope = factory.constant("slope", (channels,), init)

    def forward(self, z):
        return F.prelu(z, self.slope)


class Scale(Module):
    def __init__(self, factory: ParamFactory, init: float = 1.0):
        self.gamma = factory.constant("gamma", (1,), init)

    def forward(self, z):
        return F.scale(z, self.gamma)


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator]):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, z):
        return F.dropout(z, self.rate, self.training, self.rng)


def check_width(z: Tensor, width: int, where: str) -> None:
    if z.shape[-1] != width:
        raise DimensionError(f"{where} expects width {width}", z.shape, (width,))
