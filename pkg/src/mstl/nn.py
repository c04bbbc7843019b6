"""Layer objects over the autodiff core: conv, batch norm, linear, pooling.

Layers own uniquely named Parameters (and, for batch norm, running-statistic
buffers). ``training`` is threaded through ``forward`` explicitly instead of
being global mutable state.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Parameter, Tensor


class Layer:
    """Base: a layer exposes named parameters, named buffers, and forward."""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name: str, in_ch: int, out_ch: int, ksize: int = 3,
                 stride: int = 1, padding: int | None = None, bias: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if padding is None:
            padding = ksize // 2
        self.stride = stride
        self.padding = padding
        scale = np.sqrt(2.0 / (ksize * ksize * in_ch))
        self.weight = Parameter(
            f"{name}.weight", rng.normal(0.0, scale, size=(ksize, ksize, in_ch, out_ch))
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch)) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training=False):
        out = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics.

    Training mode normalizes by batch statistics over (n,h,w) and updates
    running stats as r <- momentum*r + (1-momentum)*batch (biased variance);
    eval mode normalizes by the stored running statistics.
    """

    def __init__(self, name: str, ch: int, momentum: float = 0.9, eps: float = 1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(ch))
        self.beta = Parameter(f"{name}.beta", np.zeros(ch))
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise DimensionError("BatchNorm2d expects (n,h,w,c) input")
        axes = (0, 1, 2)
        if training:
            mu = x.mean(axis=axes, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            self.running_mean *= self.momentum
            self.running_mean += (1.0 - self.momentum) * mu.data.reshape(-1)
            self.running_var *= self.momentum
            self.running_var += (1.0 - self.momentum) * var.data.reshape(-1)
            inv = T.div(1.0, T.tsqrt(var + self.eps))
            return centered * inv * self.gamma + self.beta
        # eval path: an affine map with constant scale/shift, but keep the
        # graph through gamma/beta so eval-mode losses stay differentiable
        inv = Tensor(1.0 / np.sqrt(self.running_var + self.eps))
        return (x - Tensor(self.running_mean)) * inv * self.gamma + self.beta


class Linear(Layer):
    def __init__(self, name: str, din: int, dout: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(1.0 / din)
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, scale, size=(din, dout)))
        self.bias = Parameter(f"{name}.bias", np.zeros(dout)) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training=False):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class ReLU(Layer):
    def forward(self, x, training=False):
        return T.relu(x)


class AvgPool2d(Layer):
    def __init__(self, size: int):
        self.size = size

    def forward(self, x, training=False):
        return T.avg_pool2d(x, self.size)
