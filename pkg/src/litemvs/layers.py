"""Parameterized convolution layers with optional batch norm and ReLU."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, batch_norm, conv2d, conv3d, deconv3d, relu

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class BatchNorm:
    """Per-channel affine normalization with running statistics."""

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor.param(np.ones(channels, dtype=dtype))
        self.beta = Tensor.param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
        )

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


def _he_weights(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class _ConvBase:
    """Shared plumbing for Conv2d / Conv3d / Deconv3d layers."""

    nd: int
    transposed = False

    def __init__(self, in_ch, out_ch, kernel, stride, rng, bn=True, act=True, dtype=np.float32):
        if kernel % 2 == 0:
            raise ValueError(f"kernel extent must be odd, got {kernel}")
        shape = (out_ch, in_ch) + (kernel,) * self.nd
        self.weight = Tensor.param(_he_weights(rng, shape, dtype))
        self.bias = Tensor.param(np.zeros(out_ch, dtype=dtype))
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.bn = BatchNorm(out_ch, dtype=dtype) if bn else None
        self.act = act

    def _conv(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = self._conv(x)
        if self.bn is not None:
            y = self.bn(y, training)
        if self.act:
            y = relu(y)
        return y

    def output_shape(self, in_shape) -> tuple[int, ...]:
        """Output shape for a (C, spatial...) input; shared with forward."""
        spatial = in_shape[1:]
        pad = self.kernel // 2
        if self.transposed:
            out = tuple(s * self.stride for s in spatial)
        else:
            out = tuple((s + 2 * pad - self.kernel) // self.stride + 1 for s in spatial)
        return (self.out_ch,) + out

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
        if self.bn is not None:
            yield from self.bn.named_parameters(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        if self.bn is not None:
            yield from self.bn.named_buffers(f"{prefix}.bn")


class Conv2dLayer(_ConvBase):
    nd = 2

    def _conv(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class Conv3dLayer(_ConvBase):
    nd = 3

    def _conv(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=self.stride)


class Deconv3dLayer(_ConvBase):
    nd = 3
    transposed = True

    def _conv(self, x: Tensor) -> Tensor:
        return deconv3d(x, self.weight, self.bias, stride=self.stride)
