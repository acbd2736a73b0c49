"""Unsupervised image denoising via Stein's unbiased risk estimate.

Trains a residual convolutional denoiser from noisy images alone by
minimizing the SURE objective with a Monte-Carlo divergence term, with a
supervised MSE baseline and PSNR/SSIM evaluation.
"""
from .loss import NoiseModel, SureConfig, analytic_divergence, mc_divergence, mse_loss, sure_loss
from .model import DESK_PRESET, FULL_PRESET, Denoiser, DenoiserConfig
from .numerics import RngStream, Tensor, conv2d, finite_diff_grad, relu, tensor_randn
from .train import Adam, Checkpoint, TrainConfig, checkpoint_load, checkpoint_save, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "Checkpoint", "Denoiser", "DenoiserConfig", "DESK_PRESET",
    "FULL_PRESET", "NoiseModel", "RngStream", "SureConfig", "Tensor",
    "TrainConfig", "analytic_divergence", "checkpoint_load",
    "checkpoint_save", "conv2d", "finite_diff_grad", "mc_divergence",
    "mse_loss", "relu", "sure_loss", "tensor_randn", "train",
]
