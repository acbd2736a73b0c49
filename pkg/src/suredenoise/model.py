"""Residual convolutional denoiser.

A stack of same-padded 3x3 conv layers with ReLU between them predicts the
noise R(y); the denoised output is y - R(y). With all parameters zero the
network is the identity map, which makes the residual formulation easy to
sanity-check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, Tensor, conv2d, relu, sub


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 16
    width: int = 64
    kernel: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd and positive")


# small preset for tests, full preset for real training
DESK_PRESET = DenoiserConfig(depth=4, width=16)
FULL_PRESET = DenoiserConfig(depth=16, width=64)


class Denoiser:
    """f(y) = y - R(y), with R a conv/ReLU stack mapping 1 -> width -> ... -> 1."""

    def __init__(self, config: DenoiserConfig, rng: RngStream, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.layers: list[tuple[Tensor, Tensor]] = []
        c_in = config.in_channels
        k = config.kernel
        for i in range(config.depth):
            c_out = config.in_channels if i == config.depth - 1 else config.width
            fan_in = c_in * k * k
            kernels = Tensor(rng.normal((c_out, c_in, k, k), 0.0, np.sqrt(2.0 / fan_in)),
                             requires_grad=True, dtype=dtype)
            bias = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
            self.layers.append((kernels, bias))
            c_in = c_out

    def forward(self, y: Tensor) -> Tensor:
        if y.data.ndim != 4 or y.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (N,{self.config.in_channels},H,W) input, got {y.shape}")
        h = y
        for i, (kernels, bias) in enumerate(self.layers):
            h = conv2d(h, kernels, bias)
            if i < len(self.layers) - 1:
                h = relu(h)
        return sub(y, h)

    def __call__(self, y: Tensor) -> Tensor:
        return self.forward(y)

    def parameters(self) -> list[Tensor]:
        """Stable order: layer by layer, kernels before bias."""
        out: list[Tensor] = []
        for kernels, bias in self.layers:
            out.append(kernels)
            out.append(bias)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_parameters(self, flats: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(flats) != len(params):
            raise ValueError("parameter list length mismatch")
        for p, arr in zip(params, flats):
            if arr.size != p.size:
                raise ValueError("parameter size mismatch")
            p.data = arr.reshape(p.shape).astype(p.dtype)

    def zero_parameters(self) -> None:
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
