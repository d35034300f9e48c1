"""Minimal module system: parameter registration, train/eval mode, layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class; parameters and sub-modules are discovered from attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Parameters and buffers by dotted name (live references)."""
        out = {n: p.data for n, p in self.named_parameters(prefix)}
        out.update(self.named_buffers(prefix))
        return out

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = _uniform(rng, (in_features, out_features), in_features, dtype)
        self.bias = _uniform(rng, (out_features,), in_features, dtype) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """(1, k) convolution, no padding, stride 1, no bias (a batch norm follows)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_width: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.kernel_width = kernel_width
        fan_in = in_channels * kernel_width
        self.weight = _uniform(rng, (out_channels, in_channels, 1, kernel_width), fan_in, dtype)

    def forward(self, x):
        return F.conv2d(x, self.weight)


class MaxPool(Module):
    def __init__(self, width: int = 2):
        super().__init__()
        self.width = width

    def forward(self, x):
        return F.max_pool(x, self.width)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float64, momentum: float = F.BN_MOMENTUM,
                 eps: float = F.BN_EPS):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x):
        from .tensor import relu

        return relu(x)


class GradientReversal(Module):
    def __init__(self, lam: float):
        super().__init__()
        self.lam = float(lam)

    def forward(self, x):
        return F.reverse_gradient(x, self.lam)


class Flatten(Module):
    def forward(self, x):
        return x.reshape((x.shape[0], -1))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def forward(self, x):
        for layer in self._children.values():
            x = layer(x)
        return x


class ConvBlock(Sequential):
    """conv (1, k) -> max-pool (1, 2) stride 2 -> batch norm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_width: int,
                 rng: np.random.Generator, dtype=np.float64, pool_width: int = 2):
        super().__init__(
            Conv2d(in_channels, out_channels, kernel_width, rng, dtype),
            MaxPool(pool_width),
            BatchNorm2d(out_channels, dtype),
            ReLU(),
        )

    @staticmethod
    def output_length(length: int, kernel_width: int, pool_width: int = 2) -> int:
        return (length - kernel_width + 1) // pool_width
