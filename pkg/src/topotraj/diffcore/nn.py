"""Small layer objects that own parameters and call into ``ops``."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Tuple

import numpy as np

from . import ops
from .array import ConfigError
from .optim import Parameter


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, gain: float = 1.0):
        self.stride = stride
        self.padding = k // 2
        self.weight = Parameter(gain * _he(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, rng, channels: int, k: int = 3, stride: int = 1):
        self.stride = stride
        self.padding = k // 2
        self.weight = Parameter(_he(rng, (channels, 1, k, k), k * k))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x):
        return ops.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, gain: float = 1.0):
        bound = gain * math.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class ResidualBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        self.stride = stride
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride)
        # small second conv keeps the block close to identity at init
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, gain=0.5)
        self.proj = Conv2d(rng, c_in, c_out, 1, stride) if (stride != 1 or c_in != c_out) else None

    def __call__(self, x):
        return ops.residual_block(
            x,
            self.conv1.weight, self.conv1.bias,
            self.conv2.weight, self.conv2.bias,
            stride=self.stride,
            proj_w=None if self.proj is None else self.proj.weight,
            proj_b=None if self.proj is None else self.proj.bias,
        )


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ConfigError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)

    def __call__(self, query, key_value):
        return ops.multi_head_attention(
            query, key_value,
            self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.o.weight, self.o.bias,
            heads=self.heads,
        )


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int, d_out: int = None):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d if d_out is None else d_out)

    def __call__(self, x):
        return self.fc2(ops.relu(self.fc1(x)))
