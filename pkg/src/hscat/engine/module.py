"""Parameter containers and the small set of layers the codec is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Owns parameters and sub-modules; discovery follows attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * (gain / np.sqrt(fan_in))).astype(np.float32)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_normal(rng, (cin, cout), cin))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, groups: int = 1, bias: bool = True):
        self.stride, self.groups = stride, groups
        fan_in = kernel * kernel * cin // groups
        self.weight = Parameter(_normal(rng, (kernel, kernel, cin // groups, cout), fan_in))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, stride=self.stride, groups=self.groups, padding="same")
        return ops.add(out, self.bias) if self.bias is not None else out


class ConvTranspose2d(Module):
    """Stride-``stride`` upsampling; weight stored in conv2d layout (k, k, cout, cin)."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 2, bias: bool = True, gain: float = 1.0):
        self.stride = stride
        # each output pixel sees roughly k*k/stride^2 input taps
        fan_in = max(1, kernel * kernel * cin // (stride * stride))
        self.weight = Parameter(_normal(rng, (kernel, kernel, cout, cin), fan_in, gain))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.conv_transpose2d(x, self.weight, stride=self.stride)
        return ops.add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    eps = 1e-6

    def __init__(self, channels: int):
        self.gain = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)
