"""Training objectives: supervised MSE and unsupervised SURE.

For y = x + w with w ~ N(0, sigma^2 I), the SURE value

    (1/K) ||y - f(y)||^2 - sigma^2 + (2 sigma^2 / K) div_y f(y)

is an unbiased estimate of the per-pixel MSE of f, needing no clean x.
The divergence (Jacobian trace) is estimated with random probes b:

    div ~= (1/eps) b^T (f(y + eps b) - f(y))

which is exact for linear f and differentiable through both forward passes,
so the whole SURE objective can be optimized by backprop. A slow
finite-difference divergence is kept as the verification oracle.

Pixel values are handled internally on the [0,1] scale; a sigma quoted on
the 0-255 scale must be divided by 255 before building a NoiseModel (see
NoiseModel.from_255).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import RngStream, Tensor, add, mul, reduce_sum, scale, sq_norm, sub


@dataclass(frozen=True)
class NoiseModel:
    """Known Gaussian noise level, in working (normalized) pixel units."""
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")

    @classmethod
    def from_255(cls, sigma_255: float) -> "NoiseModel":
        return cls(sigma_255 / 255.0)


@dataclass
class SureConfig:
    """Monte-Carlo divergence settings.

    epsilon=None picks 1e-4 * (max(y) - min(y) + 1e-3) per call, balancing
    truncation error against floating-point cancellation.
    """
    rng: RngStream
    epsilon: float | None = None
    probe_dist: str = "gaussian"
    probes_per_sample: int = 1

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.probes_per_sample < 1:
            raise ValueError("probes_per_sample must be >= 1")
        if self.probe_dist not in ("gaussian", "rademacher"):
            raise ValueError(f"unknown probe distribution {self.probe_dist!r}")


def _batch_count(t: Tensor) -> int:
    return t.shape[0] if t.data.ndim >= 2 else 1


def mse_loss(x: Tensor, fy: Tensor) -> Tensor:
    """Mean over the batch of (1/K) ||x - f(y)||^2."""
    if x.shape != fy.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {fy.shape}")
    b = _batch_count(x)
    k = x.size // b
    return scale(sq_norm(sub(x, fy)), 1.0 / (b * k))


def analytic_divergence(f: Callable[[Tensor], Tensor], y: Tensor,
                        h: float = 1e-5) -> float:
    """Jacobian trace of f at y by K central finite differences.

    Verification oracle only: non-differentiable and O(K) evaluations of f.
    """
    base = y.data.astype(np.float64)
    flat = base.reshape(-1)
    total = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).data.reshape(-1)[i]
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).data.reshape(-1)[i]
        flat[i] = orig
        total += (fp - fm) / (2.0 * h)
    return float(total)


def _draw_probe(shape, cfg: SureConfig, dtype) -> Tensor:
    if cfg.probe_dist == "rademacher":
        return Tensor(cfg.rng.rademacher(shape), dtype=dtype)
    return Tensor(cfg.rng.normal(shape), dtype=dtype)


def mc_divergence(f: Callable[[Tensor], Tensor], y: Tensor, cfg: SureConfig,
                  fy: Tensor | None = None) -> Tensor:
    """Monte-Carlo divergence estimate, averaged over the batch and over
    cfg.probes_per_sample fresh probes.

    Returns a differentiable scalar: gradients flow through both f(y + eps b)
    and f(y). Passing a precomputed fy saves one forward evaluation.
    """
    if fy is None:
        fy = f(y)
    eps = cfg.epsilon
    if eps is None:
        eps = 1e-4 * (float(y.data.max()) - float(y.data.min()) + 1e-3)
    b = _batch_count(y)
    total: Tensor | None = None
    for _ in range(cfg.probes_per_sample):
        probe = _draw_probe(y.shape, cfg, y.dtype)
        delta = sub(f(add(y, scale(probe, eps))), fy)
        est = scale(reduce_sum(mul(probe, delta)), 1.0 / (eps * b))
        total = est if total is None else add(total, est)
    return scale(total, 1.0 / cfg.probes_per_sample)


def sure_loss(y: Tensor, fy: Tensor, div: Tensor | float,
              noise: NoiseModel) -> Tensor:
    """Mean over the batch of the SURE expression.

    div is the batch-averaged divergence, either a differentiable scalar
    from mc_divergence (training) or a float from analytic_divergence
    (testing). The -sigma^2 constant has zero gradient but is kept so the
    logged value estimates the true MSE.
    """
    if y.shape != fy.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {fy.shape}")
    b = _batch_count(y)
    k = y.size // b
    fidelity = scale(sq_norm(sub(y, fy)), 1.0 / (b * k))
    div_term = scale(div, 2.0 * noise.sigma ** 2 / k) if isinstance(div, Tensor) \
        else Tensor(np.array(2.0 * noise.sigma ** 2 / k * div))
    return add(add(fidelity, div_term), -noise.sigma ** 2)
