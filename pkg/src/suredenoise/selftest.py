"""Built-in verification suites: gradient checks against central finite
differences, and the SURE-unbiasedness check against simulated noise.

These back the `selftest` CLI subcommand and are reused (with larger trial
counts) by the acceptance test suite.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .loss import NoiseModel, SureConfig, mc_divergence, mse_loss, sure_loss
from .model import Denoiser, DenoiserConfig
from .numerics import (RngStream, Tensor, add, conv2d, finite_diff_grad, mul,
                       reduce_mean, reduce_sum, relu, scale, sq_norm, sub)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|) — a scale-free gradient
    comparison that stays meaningful near zero."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
    return float(np.max(np.abs(a - n) / denom))


def check_op_gradients(trials: int, seed: int = 123, tol: float = 1e-5
                       ) -> list[tuple[str, float]]:
    """Randomized gradient checks per differentiable op, double precision.
    Returns (name, worst relative error) per op; all must be <= tol."""
    rng = RngStream(seed, 0)

    def randt(shape, grad=True):
        return Tensor(rng.normal(shape), requires_grad=grad)

    results = []

    def run(name: str, make: Callable[[], tuple[Callable, Tensor]]):
        worst = 0.0
        for _ in range(trials):
            f, x = make()
            x.zero_grad()
            f(x).backward()
            fd = finite_diff_grad(f, x)
            worst = max(worst, max_rel_error(x.grad, fd))
        results.append((name, worst))

    run("add", lambda: ((lambda x, o=randt((3, 4), False): sq_norm(add(x, o))),
                        randt((3, 4))))
    run("sub", lambda: ((lambda x, o=randt((3, 4), False): sq_norm(sub(x, o))),
                        randt((3, 4))))
    run("mul", lambda: ((lambda x, o=randt((3, 4), False): reduce_sum(mul(x, o))),
                        randt((3, 4))))
    run("scale", lambda: ((lambda x: sq_norm(scale(x, 1.7))), randt((5,))))
    run("relu", lambda: ((lambda x: sq_norm(relu(x))), randt((4, 4))))
    run("sum", lambda: ((lambda x: reduce_sum(mul(x, x))), randt((7,))))
    run("mean", lambda: ((lambda x: reduce_mean(mul(x, x))), randt((7,))))
    run("sq_norm", lambda: ((lambda x: sq_norm(x)), randt((6,))))

    def conv_case():
        x = randt((1, 2, 5, 5))
        k = Tensor(rng.normal((3, 2, 3, 3)))
        b = Tensor(rng.normal((3,)))
        return (lambda t: sq_norm(conv2d(t, k, b))), x

    def conv_kernel_case():
        x = Tensor(rng.normal((1, 2, 5, 5)))
        b = Tensor(rng.normal((3,)))
        k = randt((3, 2, 3, 3))
        return (lambda t: sq_norm(conv2d(x, t, b))), k

    run("conv2d/input", conv_case)
    run("conv2d/kernel", conv_kernel_case)
    return results


def _loss_of_params(model: Denoiser, build_loss) -> Callable[[np.ndarray], float]:
    """Scalar loss as a function of the flattened parameter vector."""
    params = model.parameters()
    shapes = [p.shape for p in params]
    sizes = [p.size for p in params]

    def f(theta: np.ndarray) -> float:
        off = 0
        for p, shp, n in zip(params, shapes, sizes):
            p.data = theta[off:off + n].reshape(shp)
            off += n
        return build_loss().item()

    return f


def check_network_gradients(trials: int, seed: int = 7, tol: float = 1e-4,
                            h: float = 1e-6) -> list[tuple[str, float]]:
    # h = 1e-6 keeps the odds of straddling a ReLU kink negligible while
    # staying far above double-precision roundoff
    """End-to-end gradient of mse_loss and sure_loss (frozen probe) w.r.t.
    all parameters of a depth-3 width-4 denoiser, vs central differences."""
    results = []
    for kind in ("mse", "sure"):
        worst = 0.0
        for t in range(trials):
            rng = RngStream(seed, 100 + t)
            model = Denoiser(DenoiserConfig(depth=3, width=4),
                             RngStream(seed, 200 + t), dtype=np.float64)
            y = Tensor(rng.normal((1, 1, 8, 8), 0.5, 0.2))
            x = Tensor(rng.normal((1, 1, 8, 8), 0.5, 0.2))
            noise = NoiseModel(25.0 / 255.0)
            frozen_probe = rng.normal(y.shape)

            def build_loss():
                fy = model(y)
                if kind == "mse":
                    return mse_loss(x, fy)
                # generous probe step: keeps the f(y+eps*b) - f(y) difference
                # well above FD cancellation noise without changing what the
                # gradient check verifies
                eps = 1e-2
                probe = Tensor(frozen_probe)
                delta = sub(model(add(y, scale(probe, eps))), fy)
                div = scale(reduce_sum(mul(probe, delta)), 1.0 / eps)
                return sure_loss(y, fy, div, noise)

            model.zero_grad()
            build_loss().backward()
            analytic = np.concatenate([p.grad.reshape(-1) for p in model.parameters()])

            f = _loss_of_params(model, build_loss)
            theta0 = np.concatenate([p.data.reshape(-1) for p in model.parameters()])
            numeric = np.zeros_like(theta0)
            for i in range(theta0.size):
                tp = theta0.copy(); tp[i] += h
                tm = theta0.copy(); tm[i] -= h
                numeric[i] = (f(tp) - f(tm)) / (2 * h)
            f(theta0)  # restore
            worst = max(worst, max_rel_error(analytic, numeric))
        results.append((f"network/{kind}", worst))
    return results


# -- SURE unbiasedness ---------------------------------------------------------

def reference_denoisers(k: int) -> list[tuple[str, Callable, Callable]]:
    """(name, f, analytic divergence of f) triples on R^k, used to test
    unbiasedness with closed-form Jacobian traces."""
    thresh = 0.1

    def soft(y: np.ndarray) -> np.ndarray:
        return np.sign(y) * np.maximum(np.abs(y) - thresh, 0.0)

    return [
        ("identity", lambda y: y, lambda y: float(k)),
        ("zero", lambda y: np.zeros_like(y), lambda y: 0.0),
        ("half", lambda y: 0.5 * y, lambda y: 0.5 * k),
        ("soft-threshold", soft, lambda y: float(np.sum(np.abs(y) > thresh))),
    ]


def check_unbiasedness(draws: int, seed: int = 11, k: int = 64,
                       sigmas_255=(10.0, 25.0, 50.0)
                       ) -> list[tuple[str, float, float, float]]:
    """For each (denoiser, sigma): M noise draws y = x + w, compare mean
    SURE (analytic divergence) against mean MSE(x, f(y)).

    Returns (label, |mean gap|, 3 * pooled standard error, mean MSE)."""
    rng = RngStream(seed, 0)
    x = rng.normal((k,), 0.5, 0.25)
    results = []
    for sigma_255 in sigmas_255:
        noise = NoiseModel.from_255(sigma_255)
        for name, f, div_fn in reference_denoisers(k):
            sure_vals = np.empty(draws)
            mse_vals = np.empty(draws)
            for m in range(draws):
                y = x + rng.normal((k,), 0.0, noise.sigma)
                fy = f(y)
                sure_vals[m] = sure_loss(Tensor(y), Tensor(fy),
                                         div_fn(y), noise).item()
                mse_vals[m] = mse_loss(Tensor(x), Tensor(fy)).item()
            gap = abs(sure_vals.mean() - mse_vals.mean())
            pooled_se = math.sqrt(sure_vals.var(ddof=1) / draws
                                  + mse_vals.var(ddof=1) / draws)
            results.append((f"{name}/sigma={sigma_255:g}", gap, 3 * pooled_se,
                            float(mse_vals.mean())))
    return results


def run_selftest(draws: int = 2000, trials: int = 20) -> bool:
    """Print one pass/fail line per check; True iff everything passed."""
    ok = True
    for name, err in check_op_gradients(trials):
        passed = err <= 1e-5
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] gradient {name}: "
              f"max rel err {err:.2e} (tol 1e-5)")
    for name, err in check_network_gradients(trials=3):
        passed = err <= 1e-4
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] gradient {name}: "
              f"max rel err {err:.2e} (tol 1e-4)")
    for label, gap, bound, _ in check_unbiasedness(draws):
        passed = gap <= bound
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] unbiasedness {label}: "
              f"|mean SURE - mean MSE| = {gap:.3e} <= {bound:.3e}")
    print("selftest:", "PASS" if ok else "FAIL")
    return ok
