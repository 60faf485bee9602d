"""Parameter containers for the network layers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype


class Module:
    """Base class; parameters and sub-modules are discovered from attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        stack = list(vars(self).values())
        while stack:
            item = stack.pop(0)
            if isinstance(item, Module):
                yield from item.modules()
            elif isinstance(item, (list, tuple)):
                stack[:0] = list(item)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (running statistics), keyed like parameters."""
        out = {}
        for name, value in vars(self).items():
            out.update(_walk_buffers(value, name))
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, value in vars(self).items():
            _load_buffers(value, name, buffers)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def _walk_buffers(value, name: str) -> dict:
    out = {}
    if isinstance(value, BatchNorm):
        out[f"{name}.running_mean"] = value.running_mean
        out[f"{name}.running_var"] = value.running_var
    if isinstance(value, Module):
        for sub, v in vars(value).items():
            out.update(_walk_buffers(v, f"{name}.{sub}"))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            out.update(_walk_buffers(item, f"{name}.{i}"))
    return out


def _load_buffers(value, name: str, buffers: dict) -> None:
    if isinstance(value, BatchNorm):
        value.running_mean = np.array(buffers[f"{name}.running_mean"], dtype=value.running_mean.dtype)
        value.running_var = np.array(buffers[f"{name}.running_var"], dtype=value.running_var.dtype)
    if isinstance(value, Module):
        for sub, v in vars(value).items():
            _load_buffers(v, f"{name}.{sub}", buffers)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _load_buffers(item, f"{name}.{i}", buffers)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(default_dtype())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, init: str = "he", init_std: float = 0.0):
        if init == "he":
            w = he_normal(rng, (in_features, out_features), in_features)
        elif init == "zeros":
            # init_std > 0 perturbs an otherwise zero initialisation
            w = rng.normal(0.0, init_std, size=(in_features, out_features)) if init_std else \
                np.zeros((in_features, out_features))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = None
        if bias:
            b = rng.normal(0.0, init_std, size=out_features) if (init == "zeros" and init_std) \
                else np.zeros(out_features)
            self.bias = Parameter(b)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True, init_std: Optional[float] = None):
        shape = (kernel, kernel, cin, cout)
        if init_std is None:
            w = he_normal(rng, shape, kernel * kernel * cin)
        else:
            w = rng.normal(0.0, init_std, size=shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")


class BatchNorm(Module):
    """Per-channel normalisation; running statistics are used in eval mode."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-3):
        dt = default_dtype()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training:
            out, _ = ops.batch_norm(x, self.gamma, self.beta, self.eps,
                                    stats=(self.running_mean, self.running_var))
            return out
        out, (mean, var) = ops.batch_norm(x, self.gamma, self.beta, self.eps)
        n = x.data.size // x.shape[-1]
        unbiased = var * n / max(n - 1, 1)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        return out


class ConvBlock(Module):
    """3x3 conv, optional batch norm, relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1,
                 batch_norm: bool = True, bn_momentum: float = 0.1):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, bias=not batch_norm)
        self.norm = BatchNorm(cout, momentum=bn_momentum) if batch_norm else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return ops.relu(y)
