"""Noise schedule, forward corruption, reverse sampling, and the training objective.

The forward chain corrupts a [-1, 1] image toward Gaussian noise; the
cumulative signal-retention coefficient gamma_t tracks how much of the
original survives at step t. The reverse chain denoises from pure noise,
one posterior step at a time, guided by the network's noise prediction
conditioned on the gated modality stack.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .network import FusionNet
from .resample import bicubic_resample
from .tensor import ShapeError, Tensor, no_grad

ALLOWED_SCALES = (2, 4, 8)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise amounts and their running products.

    `beta[i]` is the step-(i+1) variance increment; `gamma` has length T+1
    with gamma[0] = 1 and gamma[t] the product of (1 - beta) up to step t,
    strictly decreasing and positive.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha[t - 1])

    def gamma_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return float(self.gamma[t])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")


def build_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    """Linear beta schedule, endpoints included; gamma as exact running product."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}; supported: linear")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    gamma = np.empty(T + 1, dtype=np.float64)
    gamma[0] = 1.0
    np.cumprod(alpha, out=gamma[1:])
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, gamma=gamma)


@dataclass
class DiffusionState:
    """One point of the reverse chain: the latent at step t plus conditioning."""

    i_t: Tensor
    t: int
    z: Tensor

    def __post_init__(self):
        if self.i_t.ndim != 3 or self.i_t.shape[0] != 3:
            raise ShapeError(f"latent must be (3, H, W), got {self.i_t.shape}")
        if self.t < 0:
            raise ValueError(f"step must be >= 0, got {self.t}")


def corrupt_with_gamma(i0: Tensor, eps: Tensor, gamma) -> Tensor:
    """sqrt(gamma) * i0 + sqrt(1 - gamma) * eps; gamma scalar or per-sample vector."""
    if i0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} differs from image shape {i0.shape}")
    g = np.asarray(gamma, dtype=np.float64)
    if g.ndim:  # per-sample coefficients broadcast over (N, C, H, W)
        g = g.reshape((-1,) + (1,) * (i0.ndim - 1))
    return i0 * np.sqrt(g) + eps * np.sqrt(1.0 - g)


def q_sample(i0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Corrupt a clean [-1, 1] image to step t; t = 0 returns it unchanged."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"step {t} outside [0, {sched.T}]")
    return corrupt_with_gamma(i0, eps, sched.gamma_at(t))


def predict_x0(i_t: Tensor, eps_hat: Tensor, gamma_t, clamp: bool = True) -> Tensor:
    """Invert the corruption given a noise estimate; result clamped to [-1, 1]."""
    g = np.asarray(gamma_t, dtype=np.float64)
    if np.any(g <= 0.0) or np.any(g > 1.0):
        raise ValueError(f"gamma_t must be in (0, 1], got {gamma_t}")
    if i_t.shape != eps_hat.shape:
        raise ShapeError(f"latent {i_t.shape} and noise estimate {eps_hat.shape} differ")
    if g.ndim:
        g = g.reshape((-1,) + (1,) * (i_t.ndim - 1))
    x0 = (i_t - eps_hat * np.sqrt(1.0 - g)) * (1.0 / np.sqrt(g))
    return x0.clamp(-1.0, 1.0) if clamp else x0


def p_sample_step(state: DiffusionState, net, sched: NoiseSchedule, rng: np.random.Generator) -> DiffusionState:
    """One reverse step t -> t-1.

    Posterior mean from the noise prediction, plus sigma_t-scaled Gaussian
    noise for t > 1; the final step (t = 1) is deterministic and does not
    consume the generator.
    """
    t = state.t
    if t < 1:
        raise ValueError("cannot step below t = 1; the chain ends at t = 0")
    beta = sched.beta_at(t)
    alpha = sched.alpha_at(t)
    gamma = sched.gamma_at(t)
    gamma_prev = sched.gamma_at(t - 1)

    with no_grad():
        eps_hat = net.forward(state.z, state.i_t, gamma).data
    mean = (state.i_t.data - (beta / np.sqrt(1.0 - gamma)) * eps_hat) / np.sqrt(alpha)
    if t > 1:
        sigma = np.sqrt(beta * (1.0 - gamma_prev) / (1.0 - gamma))
        mean = mean + sigma * rng.standard_normal(mean.shape)
    return DiffusionState(i_t=Tensor(mean), t=t - 1, z=state.z)


def sample_fusion(
    x: np.ndarray,
    y: np.ndarray,
    s: np.ndarray,
    net: FusionNet,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    scale: int,
    allowed_scales=ALLOWED_SCALES,
    on_step=None,
) -> np.ndarray:
    """Fuse three low-resolution [0, 1] modalities into one (3, H*scale, W*scale) image.

    The modalities are upsampled bicubically, gated by the attention block,
    and used to condition a full reverse chain started from pure noise. The
    result is mapped back from [-1, 1] to [0, 1]. Deterministic for a fixed
    generator state; `on_step(t, seconds)` is called after each step.
    """
    if int(scale) not in allowed_scales:
        raise ValueError(f"scale {scale} not in allowed set {tuple(allowed_scales)}")
    mods = [np.asarray(m, dtype=np.float64) for m in (x, y, s)]
    if not (mods[0].shape == mods[1].shape == mods[2].shape):
        raise ShapeError(f"modality shapes differ: {[m.shape for m in mods]}")
    if mods[0].ndim == 2:
        mods = [m[None] for m in mods]
    if mods[0].ndim != 3 or mods[0].shape[0] != 1:
        raise ShapeError(f"modalities must be (1, h, w) single-channel, got {mods[0].shape}")
    _, h, w = mods[0].shape
    out_h, out_w = h * int(scale), w * int(scale)

    up = np.concatenate([bicubic_resample(m, out_h, out_w) for m in mods], axis=0)
    cond = Tensor((2.0 * up - 1.0)[None])  # (1, 3, H, W) in [-1, 1]
    with no_grad():
        z = net.conditioning(cond).reshape((3, out_h, out_w))

    state = DiffusionState(i_t=Tensor(rng.standard_normal((3, out_h, out_w))), t=sched.T, z=z)
    while state.t > 0:
        started = time.perf_counter()
        state = p_sample_step(state, net, sched, rng)
        if on_step is not None:
            on_step(state.t + 1, time.perf_counter() - started)
    fused = np.clip((state.i_t.data + 1.0) / 2.0, 0.0, 1.0)
    return fused


@dataclass
class NoisePrediction:
    """One (t, eps) draw and everything computed from it."""

    t: int
    gamma_t: float
    eps: Tensor
    i_t: Tensor
    eps_hat: Tensor


def draw_noise_prediction(net, cond: np.ndarray, gt_norm: np.ndarray, sched: NoiseSchedule,
                          rng: np.random.Generator) -> NoisePrediction:
    """Draw t then eps, corrupt the target, and run the denoiser once.

    `cond` and `gt_norm` are (3, H, W) arrays in [-1, 1]. The draw order
    (t first, then the noise field) is part of the reproducibility contract.
    """
    t = int(rng.integers(1, sched.T + 1))
    gamma_t = sched.gamma_at(t)
    eps = Tensor(rng.standard_normal(gt_norm.shape))
    i_t = q_sample(Tensor(gt_norm), t, eps, sched)
    z = net.conditioning(Tensor(cond[None]))
    eps_hat = net.forward(z.reshape(cond.shape), i_t, gamma_t)
    return NoisePrediction(t=t, gamma_t=gamma_t, eps=eps, i_t=i_t, eps_hat=eps_hat)


def noise_objective(net, sample, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Mean squared error between drawn and predicted noise for one sample."""
    if sample.gt is None:
        raise ValueError(f"sample {getattr(sample, 'id', '?')} has no ground-truth fusion")
    draw = draw_noise_prediction(net, sample.conditioning_stack(), sample.gt_normalized(), sched, rng)
    diff = draw.eps - draw.eps_hat
    return (diff * diff).mean()
