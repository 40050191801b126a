"""Thin stateful wrappers binding ops to parameters stored in a ParamSet."""

from __future__ import annotations

import numpy as np

from . import ops
from .params import ParamSet, glorot_uniform, normal_init
from .tensor import Tensor


def _init_weight(rng, shape, init: str, stddev: float, fan_in: int, fan_out: int):
    if init == "normal":
        return normal_init(rng, shape, stddev)
    if init == "glorot_uniform":
        return glorot_uniform(rng, shape, fan_in, fan_out)
    raise ValueError(f"unknown initializer {init!r}")


class Dense:
    def __init__(self, params: ParamSet, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, init: str = "normal", stddev: float = 0.02):
        self.w = params.add(f"{name}/kernel", _init_weight(rng, (d_in, d_out), init, stddev, d_in, d_out))
        self.b = params.add(f"{name}/bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w, self.b)


class Conv2D:
    def __init__(self, params: ParamSet, name: str, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: str = "same",
                 init: str = "normal", stddev: float = 0.02):
        shape = (kernel, kernel, c_in, c_out)
        self.k = params.add(f"{name}/kernel",
                            _init_weight(rng, shape, init, stddev, kernel * kernel * c_in, kernel * kernel * c_out))
        self.b = params.add(f"{name}/bias", np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.k, self.b, self.stride, self.padding)


class Conv2DTranspose:
    def __init__(self, params: ParamSet, name: str, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, stride: int = 2,
                 init: str = "normal", stddev: float = 0.02):
        shape = (kernel, kernel, c_out, c_in)
        self.k = params.add(f"{name}/kernel",
                            _init_weight(rng, shape, init, stddev, kernel * kernel * c_in, kernel * kernel * c_out))
        self.b = params.add(f"{name}/bias", np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.k, self.b, self.stride, "same")


class BatchNorm:
    def __init__(self, params: ParamSet, name: str, channels: int,
                 momentum: float = 0.99, epsilon: float = 1e-5):
        self.gamma = params.add(f"{name}/gamma", np.ones(channels))
        self.beta = params.add(f"{name}/beta", np.zeros(channels))
        self.mean = params.add_buffer(f"{name}/moving_mean", np.zeros(channels))
        self.var = params.add_buffer(f"{name}/moving_variance", np.ones(channels))
        self.momentum = momentum
        self.epsilon = epsilon

    def __call__(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.mean, self.var, training,
                              self.momentum, self.epsilon, update_stats)


class Embedding:
    def __init__(self, params: ParamSet, name: str, num: int, dim: int,
                 rng: np.random.Generator, stddev: float = 0.02):
        self.table = params.add(f"{name}/embeddings", normal_init(rng, (num, dim), stddev))

    def __call__(self, labels) -> Tensor:
        return ops.embed(labels, self.table)
