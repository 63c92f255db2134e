"""Training losses: noise prediction plus the joint pixel/structure term.

The PSF loss combines mean squared error with an SSIM dissimilarity
(1 - SSIM) so that both parts shrink as the reconstruction improves. During
training it is applied to the clean-image estimate recovered from the noise
prediction, and added to the diffusion objective computed from the same
(t, eps) draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .diffusion import NoiseSchedule, draw_noise_prediction, predict_x0
from .tensor import ShapeError, Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DIFFUSION_RANGE = 2.0  # dynamic range of [-1, 1] tensors


@dataclass(frozen=True)
class LossWeights:
    """Weights of the MSE and SSIM terms; both must lie in (0, 1]."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    psf_enabled: bool = True

    def __post_init__(self):
        for name, v in (("lambda1", self.lambda1), ("lambda2", self.lambda2)):
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")


def mse_loss(p: Tensor, t: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if p.shape != t.shape:
        raise ShapeError(f"mse_loss: shapes differ, {p.shape} vs {t.shape}")
    d = p - t
    return (d * d).mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1-D Gaussian taps normalized to sum 1."""
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _as_planes(t: Tensor) -> Tensor:
    """Collapse any leading dims so the image is (B, 1, H, W)."""
    if t.ndim < 2:
        raise ShapeError(f"expected at least 2-D image, got {t.shape}")
    h, w = t.shape[-2], t.shape[-1]
    return t.reshape((-1, 1, h, w))


def _local_mean(t: Tensor, kv: Tensor, kh: Tensor) -> Tensor:
    return tt.conv2d(tt.conv2d(t, kv), kh)


def ssim_index(p: Tensor, t: Tensor, data_range: float, size: int = SSIM_WINDOW,
               sigma: float = SSIM_SIGMA) -> Tensor:
    """Mean local structural similarity over Gaussian windows; differentiable.

    Windows are fully interior (no padding), so images must be at least as
    large as the window. Returns a scalar in [-1, 1].
    """
    if p.shape != t.shape:
        raise ShapeError(f"ssim_index: shapes differ, {p.shape} vs {t.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    h, w = p.shape[-2], p.shape[-1]
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} smaller than the {size}x{size} window")

    win = gaussian_window(size, sigma)
    kv = Tensor(win.reshape(1, 1, size, 1))
    kh = Tensor(win.reshape(1, 1, 1, size))
    p, t = _as_planes(p), _as_planes(t)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_p = _local_mean(p, kv, kh)
    mu_t = _local_mean(t, kv, kh)
    var_p = _local_mean(p * p, kv, kh) - mu_p * mu_p
    var_t = _local_mean(t * t, kv, kh) - mu_t * mu_t
    cov = _local_mean(p * t, kv, kh) - mu_p * mu_t

    num = (2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + mu_t * mu_t + c1) * (var_p + var_t + c2)
    return (num / den).mean()


def psf_loss(p: Tensor, t: Tensor, weights: LossWeights, data_range: float = DIFFUSION_RANGE) -> Tensor:
    """lambda1 * MSE + lambda2 * (1 - SSIM); zero iff the images agree."""
    structure = 1.0 - ssim_index(p, t, data_range)
    return weights.lambda1 * mse_loss(p, t) + weights.lambda2 * structure


def training_loss(net, sample, sched: NoiseSchedule, weights: LossWeights,
                  rng: np.random.Generator) -> Tensor:
    """Diffusion objective plus (optionally) the PSF term on the same draw.

    One (t, eps) draw feeds both terms; with the PSF term disabled the
    result is exactly the plain noise-prediction objective, consuming the
    identical generator stream.
    """
    if sample.gt is None:
        raise ValueError(f"sample {getattr(sample, 'id', '?')} has no ground-truth fusion")
    gt_norm = sample.gt_normalized()
    draw = draw_noise_prediction(net, sample.conditioning_stack(), gt_norm, sched, rng)
    diff = draw.eps - draw.eps_hat
    objective = (diff * diff).mean()
    if not weights.psf_enabled:
        return objective
    x0_hat = predict_x0(draw.i_t, draw.eps_hat, draw.gamma_t)
    return objective + psf_loss(x0_hat, Tensor(gt_norm), weights)
