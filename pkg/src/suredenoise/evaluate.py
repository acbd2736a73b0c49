"""Image quality metrics and evaluation reports.

Metrics are computed on the 0-255 scale: PSNR = 10 log10(255^2 / MSE) with
MSE the per-pixel mean squared error, and SSIM with the original constants
(11x11 Gaussian window sigma=1.5, C1=(0.01*255)^2, C2=(0.03*255)^2, valid
windows, no downsampling). Scores use the unclipped denoiser output;
clipping only applies to saved 8-bit images.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GrayImage, load_pgm
from .loss import NoiseModel
from .model import Denoiser
from .numerics import RngStream, Tensor
from .train import STREAM_EVAL


@dataclass
class MetricsRow:
    image_id: str
    psnr: float      # dB; math.inf for identical images
    ssim: float
    mse: float       # 0-255 scale
    seconds: float
    error: str | None = None


@dataclass
class Report:
    rows: list[MetricsRow] = field(default_factory=list)
    sigma_255: float = 0.0
    model_id: str = ""

    def _ok_rows(self) -> list[MetricsRow]:
        return [r for r in self.rows if r.error is None]

    def averages(self) -> dict[str, float]:
        rows = self._ok_rows()
        if not rows:
            return {"psnr": math.nan, "ssim": math.nan,
                    "mse": math.nan, "seconds": math.nan}
        return {
            "psnr": sum(r.psnr for r in rows) / len(rows),
            "ssim": sum(r.ssim for r in rows) / len(rows),
            "mse": sum(r.mse for r in rows) / len(rows),
            "seconds": sum(r.seconds for r in rows) / len(rows),
        }

    def to_csv(self) -> str:
        lines = ["image,psnr,ssim,mse,seconds"]
        for r in self.rows:
            if r.error is not None:
                lines.append(f"{r.image_id},error,error,error,error")
            else:
                lines.append(f"{r.image_id},{r.psnr!r},{r.ssim!r},{r.mse!r},{r.seconds!r}")
        avg = self.averages()
        lines.append(f"average,{avg['psnr']!r},{avg['ssim']!r},"
                     f"{avg['mse']!r},{avg['seconds']!r}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = f"{'Image':<24}{'PSNR':>10}{'SSIM':>10}{'MSE':>12}{'Time (s)':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            if r.error is not None:
                lines.append(f"{r.image_id:<24}{'error: ' + r.error}")
            else:
                lines.append(f"{r.image_id:<24}{r.psnr:>10.2f}{r.ssim:>10.4f}"
                             f"{r.mse:>12.3f}{r.seconds:>10.3f}")
        avg = self.averages()
        lines.append("-" * len(header))
        lines.append(f"{'Average':<24}{avg['psnr']:>10.2f}{avg['ssim']:>10.4f}"
                     f"{avg['mse']:>12.3f}{avg['seconds']:>10.3f}")
        return "\n".join(lines) + "\n"


def _to_255(image: GrayImage) -> np.ndarray:
    return image.pixels * 255.0


def psnr(reference: GrayImage, candidate: GrayImage) -> float:
    if (reference.width, reference.height) != (candidate.width, candidate.height):
        raise ValueError("image dimensions differ")
    mse = float(np.mean((_to_255(reference) - _to_255(candidate)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def mse_255(reference: GrayImage, candidate: GrayImage) -> float:
    if (reference.width, reference.height) != (candidate.width, candidate.height):
        raise ValueError("image dimensions differ")
    return float(np.mean((_to_255(reference) - _to_255(candidate)) ** 2))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    # separable valid-mode Gaussian filtering via sliding windows
    win = np.lib.stride_tricks.sliding_window_view(img, len(k1d), axis=0)
    img = np.tensordot(win, k1d, axes=([2], [0]))
    win = np.lib.stride_tricks.sliding_window_view(img, len(k1d), axis=1)
    return np.tensordot(win, k1d, axes=([2], [0]))


def ssim(reference: GrayImage, candidate: GrayImage) -> float:
    if (reference.width, reference.height) != (candidate.width, candidate.height):
        raise ValueError("image dimensions differ")
    if reference.width < _SSIM_WINDOW or reference.height < _SSIM_WINDOW:
        raise ValueError(f"image smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    a = _to_255(reference)
    b = _to_255(candidate)
    k = _gaussian_kernel1d(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = _windowed_mean(a, k)
    mu_b = _windowed_mean(b, k)
    var_a = _windowed_mean(a * a, k) - mu_a ** 2
    var_b = _windowed_mean(b * b, k) - mu_b ** 2
    cov = _windowed_mean(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


def denoise_image(model: Denoiser, noisy: GrayImage
                  ) -> tuple[GrayImage, GrayImage, float]:
    """Whole-image forward pass. Returns (unclipped, clipped, seconds);
    metrics use the unclipped output, saved files the clipped one."""
    x = Tensor(noisy.pixels.reshape(1, 1, noisy.height, noisy.width),
               dtype=model.dtype)
    start = time.perf_counter()
    out = model(x)
    elapsed = time.perf_counter() - start
    raw = out.data.reshape(noisy.height, noisy.width).astype(np.float64)
    return (GrayImage.from_array(raw),
            GrayImage.from_array(np.clip(raw, 0.0, 1.0)),
            elapsed)


def evaluate_set(model: Denoiser, clean_paths: list[Path], noise: NoiseModel,
                 seed: int, model_id: str = "") -> Report:
    """Per image: seeded per-image noise stream, denoise, metrics row.
    Unreadable images become error rows; the run continues."""
    report = Report(sigma_255=noise.sigma * 255.0, model_id=model_id)
    for i, path in enumerate(clean_paths):
        image_id = Path(path).name
        try:
            clean = load_pgm(path)
        except Exception as e:
            report.rows.append(MetricsRow(image_id=image_id, psnr=math.nan,
                                          ssim=math.nan, mse=math.nan,
                                          seconds=math.nan, error=str(e)))
            continue
        rng = RngStream(seed, STREAM_EVAL * 1000 + i)
        noisy_px = clean.pixels + rng.normal(clean.pixels.shape, 0.0, noise.sigma)
        noisy = GrayImage.from_array(noisy_px)
        denoised, _, elapsed = denoise_image(model, noisy)
        report.rows.append(MetricsRow(
            image_id=image_id,
            psnr=psnr(clean, denoised),
            ssim=ssim(clean, denoised),
            mse=mse_255(clean, denoised),
            seconds=elapsed,
        ))
    return report
