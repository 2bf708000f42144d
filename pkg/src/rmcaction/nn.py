"""Layer modules: parameter registration, naming, and the building blocks
used by every network in the package.

Weights initialize from a centered uniform distribution scaled by
1/sqrt(fan_in); batchnorm starts at identity. Construction order is
fixed, so a given seed always produces the same parameter tree.
"""

from __future__ import annotations

import math
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, default_dtype


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    """Base class with recursive parameter/buffer discovery.

    Children are found by walking instance attributes (and lists of
    modules) in insertion order, which makes parameter names and
    iteration order deterministic for a fixed construction sequence.
    """

    buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for cname, child in self.children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> List[Parameter]:
        """All trainable parameters, with hierarchical names assigned."""
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for bname in type(self).buffer_names:
            yield prefix + bname, getattr(self, bname)
        for cname, child in self.children():
            yield from child.named_buffers(prefix + cname + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride=1, padding=0,
                 bias: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        kh, kw = F._pair(kernel)
        self.stride = F._pair(stride)
        self.padding = F._pair(padding)
        fan_in = c_in * kh * kw
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(c_out, dtype=default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride=1, padding=0,
                 bias: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        kt, kh, kw = F._triple(kernel)
        self.stride = F._triple(stride)
        self.padding = F._triple(padding)
        fan_in = c_in * kt * kh * kw
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kt, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(c_out, dtype=default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Channel-axis batch normalization for 4-d or 5-d inputs."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        dt = default_dtype()
        self.gamma = Parameter(np.ones(num_features, dtype=dt))
        self.beta = Parameter(np.zeros(num_features, dtype=dt))
        self.running_mean = np.zeros(num_features, dtype=dt)
        self.running_var = np.ones(num_features, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out, dtype=default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())
