"""Conditional denoiser: tri-modal channel attention plus a small U-Net.

The TMFA block recalibrates the three concatenated modality channels with
squeeze-and-excitation gating before they condition the diffusion model.
The denoiser itself is a 4-level U-Net over the 6-channel concatenation of
conditioning features and noisy latent, with residual blocks conditioned on
a sinusoidal embedding of the noise level (scale and shift after the first
normalization, as in conditional-normalization residual blocks), a
self-attention stage at the lowest resolution, and a zero-initialized head
so the initial noise prediction is exactly zero.

The head reads, next to the decoder features, a set of raw input taps:
the conditioning stack, the latent, and the latent pre-scaled by
1/sqrt(1 - gamma). That last tap matters: the ideal noise prediction is
(I_t - sqrt(gamma) * fusion(z)) / sqrt(1 - gamma), whose leading term would
otherwise require the optimizer to grow a gain of up to 1/sqrt(beta_1)
out of small weights. A noise-level-conditioned linear gate over the whole
stack lets the head combine the taps with gamma-dependent coefficients.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as tt
from .tensor import ShapeError, Tensor

DEFAULT_WIDTHS = (16, 32, 64, 64)
LEVELS = 4
SPATIAL_MULTIPLE = 2 ** (LEVELS - 1)  # feature maps shrink 3 times
EMBED_DIM = 32
EMBED_FEATURES = 4 * EMBED_DIM


def _num_groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


class ConvLayer:
    """Bias-free 3x3 (or kxk) convolution; padding preserves spatial size."""

    def __init__(self, c_in, c_out, rng, k=3, dtype=np.float64, zero_init=False):
        self.k = k
        if zero_init:
            self.kernel = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype), requires_grad=True)
        else:
            self.kernel = tt.kaiming_init((c_out, c_in, k, k), c_in * k * k, rng, dtype)

    def __call__(self, x):
        return tt.conv2d(x, self.kernel, stride=1, padding=self.k // 2)

    def parameters(self):
        return [("kernel", self.kernel)]


class DenseLayer:
    def __init__(self, f_in, f_out, rng, dtype=np.float64):
        self.weight = tt.kaiming_init((f_out, f_in), f_in, rng, dtype)
        self.bias = Tensor(np.zeros(f_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return tt.dense(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GroupNorm:
    """Per-group normalization over (channels/groups, H, W) with affine."""

    def __init__(self, channels, dtype=np.float64, eps=1e-5):
        self.groups = _num_groups(channels)
        self.eps = eps
        self.weight = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x):
        n, c, h, w = x.shape
        g = x.reshape((n, self.groups, (c // self.groups) * h * w))
        mu = g.mean(axis=2, keepdims=True)
        centered = g - mu
        var = (centered * centered).mean(axis=2, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed.reshape((n, c, h, w)) * self.weight + self.bias

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ResBlock:
    """conv -> norm -> noise-level scale/shift -> swish, twice, plus skip."""

    def __init__(self, c_in, c_out, rng, dtype=np.float64):
        self.conv1 = ConvLayer(c_in, c_out, rng, dtype=dtype)
        self.norm1 = GroupNorm(c_out, dtype=dtype)
        self.emb_proj = DenseLayer(EMBED_FEATURES, 2 * c_out, rng, dtype=dtype)
        self.conv2 = ConvLayer(c_out, c_out, rng, dtype=dtype)
        self.norm2 = GroupNorm(c_out, dtype=dtype)
        self.skip = None if c_in == c_out else ConvLayer(c_in, c_out, rng, k=1, dtype=dtype)

    def __call__(self, x, emb):
        n = x.shape[0]
        h = self.norm1(self.conv1(x))
        cond = self.emb_proj(emb).reshape((n, -1, 1, 1))
        c = h.shape[1]
        h = h * (1.0 + cond[:, :c]) + cond[:, c:]
        h = h.swish()
        h = self.norm2(self.conv2(h)).swish()
        return h + (x if self.skip is None else self.skip(x))

    def parameters(self):
        layers = [("conv1", self.conv1), ("norm1", self.norm1), ("emb_proj", self.emb_proj),
                  ("conv2", self.conv2), ("norm2", self.norm2)]
        if self.skip is not None:
            layers.append(("skip", self.skip))
        return [(f"{ln}.{pn}", p) for ln, layer in layers for pn, p in layer.parameters()]


class TmfaBlock:
    """Tri-modal fusion attention: SE-style channel gating of the modality stack.

    Global average pooling squeezes each channel, a two-layer bottleneck
    (ReLU, then sigmoid) produces per-channel weights in (0, 1), and the
    input is rescaled channel-wise. The bottleneck width is ceil(C/r),
    never below 1.
    """

    def __init__(self, channels=3, reduction=16, rng=None, dtype=np.float64):
        if reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.reduction = reduction
        bottleneck = max(1, math.ceil(channels / reduction))
        self.fc1 = DenseLayer(channels, bottleneck, rng, dtype=dtype)
        self.fc2 = DenseLayer(bottleneck, channels, rng, dtype=dtype)

    def __call__(self, c):
        if c.ndim != 4 or c.shape[1] != self.channels:
            raise ShapeError(f"TMFA expects (N, {self.channels}, H, W), got {c.shape}")
        n = c.shape[0]
        squeezed = tt.global_avg_pool(c)
        weights = self.fc2(self.fc1(squeezed).relu()).sigmoid()
        return c * weights.reshape((n, self.channels, 1, 1))

    def attention_weights(self, c) -> np.ndarray:
        """Per-channel gate values for inspection, shape (N, C)."""
        with tt.no_grad():
            squeezed = tt.global_avg_pool(c)
            return self.fc2(self.fc1(squeezed).relu()).sigmoid().data

    def parameters(self):
        return [(f"{ln}.{pn}", p) for ln, layer in [("fc1", self.fc1), ("fc2", self.fc2)]
                for pn, p in layer.parameters()]


def concat_modalities(x: Tensor, y: Tensor, s: Tensor) -> Tensor:
    """Stack three (1, H, W) modality images into (3, H, W), order (x, y, s)."""
    for name, t in (("x", x), ("y", y), ("s", s)):
        if t.ndim != 3 or t.shape[0] != 1:
            raise ShapeError(f"modality {name} must be (1, H, W), got {t.shape}")
    if not (x.shape == y.shape == s.shape):
        raise ShapeError(f"modality shapes differ: {x.shape}, {y.shape}, {s.shape}")
    return tt.concat([x, y, s], axis=0)


def split_modalities(c: Tensor):
    """Inverse of :func:`concat_modalities`."""
    if c.ndim != 3 or c.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W), got {c.shape}")
    return c[0:1], c[1:2], c[2:3]


def gamma_embedding(gamma: np.ndarray, dim: int = EMBED_DIM, dtype=np.float64) -> Tensor:
    """Sinusoidal features of the noise level, shape (N, dim).

    The square root of gamma is expanded against log-spaced frequencies.
    sqrt(gamma) lives in (0, 1], so the band stops at 64 rad: features vary
    over a few cycles across the range instead of oscillating wildly. The
    embedding is a constant input to the network (no gradient).
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(64.0), half))
    ang = np.sqrt(gamma)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return Tensor(emb.astype(dtype))


class FusionNet:
    """The conditional denoiser: noise prediction from (z, I_t, gamma_t).

    4 resolution levels on the way down (H, H/2, H/4, H/8), self-attention
    at H/8, and 4 mirrored levels on the way up, each consuming the skip
    from its contracting twin. Spatial sizes must be multiples of 8.
    """

    INPUT_TAPS = 9  # z, i_t, and i_t / sqrt(1 - gamma)

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, tmfa_enabled: bool = True,
                 reduction: int = 16, rng: np.random.Generator | None = None, dtype=np.float64):
        if len(widths) != LEVELS:
            raise ValueError(f"widths must have {LEVELS} entries, got {widths}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = tuple(int(w) for w in widths)
        self.dtype = dtype
        self.tmfa_enabled = bool(tmfa_enabled)
        self.tmfa = TmfaBlock(3, reduction, rng, dtype=dtype) if tmfa_enabled else None

        w0, w1, w2, w3 = self.widths
        self.emb_fc1 = DenseLayer(EMBED_DIM, EMBED_FEATURES, rng, dtype=dtype)
        self.emb_fc2 = DenseLayer(EMBED_FEATURES, EMBED_FEATURES, rng, dtype=dtype)
        self.stem = ConvLayer(6, w0, rng, dtype=dtype)
        self.enc = [
            ResBlock(w0, w0, rng, dtype=dtype),
            ResBlock(w0, w1, rng, dtype=dtype),
            ResBlock(w1, w2, rng, dtype=dtype),
            ResBlock(w2, w3, rng, dtype=dtype),
        ]
        self.attention = tt.SelfAttentionParams(w3, rng, dtype=dtype)
        self.dec = [
            ResBlock(2 * w3, w3, rng, dtype=dtype),
            ResBlock(w3 + w2, w2, rng, dtype=dtype),
            ResBlock(w2 + w1, w1, rng, dtype=dtype),
            ResBlock(w1 + w0, w0, rng, dtype=dtype),
        ]
        self.out_gate = DenseLayer(EMBED_FEATURES, 2 * (w0 + self.INPUT_TAPS), rng, dtype=dtype)
        self.head = ConvLayer(w0 + self.INPUT_TAPS, 3, rng, dtype=dtype, zero_init=True)

    # -- conditioning ---------------------------------------------------------

    def conditioning(self, modalities: Tensor) -> Tensor:
        """TMFA-gated conditioning features; pass-through when gating is off."""
        return self.tmfa(modalities) if self.tmfa_enabled else modalities

    # -- denoiser forward -----------------------------------------------------

    def forward(self, z: Tensor, i_t: Tensor, gamma) -> Tensor:
        """Predicted noise with the shape of `i_t`.

        Accepts (N, 3, H, W) batches or single (3, H, W) images; `gamma` is
        a scalar or a length-N sequence of per-sample noise levels.
        """
        single = i_t.ndim == 3
        if single:
            z = z.reshape((1, *z.shape))
            i_t = i_t.reshape((1, *i_t.shape))
        if z.ndim != 4 or i_t.ndim != 4:
            raise ShapeError(f"expected (N, 3, H, W) inputs, got z {z.shape}, i_t {i_t.shape}")
        if z.shape != i_t.shape:
            raise ShapeError(f"conditioning {z.shape} and latent {i_t.shape} differ")
        n, _, h, w = i_t.shape
        if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
            raise ShapeError(
                f"spatial size {h}x{w} not supported: the {LEVELS}-level network needs "
                f"multiples of {SPATIAL_MULTIPLE}"
            )

        gam = np.broadcast_to(np.atleast_1d(np.asarray(gamma, dtype=np.float64)), (n,))
        emb = self.emb_fc2(self.emb_fc1(gamma_embedding(gam, dtype=self.dtype)).swish())

        x = self.stem(tt.concat([z, i_t], axis=1))
        e0 = self.enc[0](x, emb)
        e1 = self.enc[1](tt.avg_pool2d(e0), emb)
        e2 = self.enc[2](tt.avg_pool2d(e1), emb)
        e3 = self.enc[3](tt.avg_pool2d(e2), emb)

        m = tt.self_attention(e3, self.attention)

        d3 = self.dec[0](tt.concat([m, e3], axis=1), emb)
        d2 = self.dec[1](tt.concat([tt.upsample_nearest(d3), e2], axis=1), emb)
        d1 = self.dec[2](tt.concat([tt.upsample_nearest(d2), e1], axis=1), emb)
        d0 = self.dec[3](tt.concat([tt.upsample_nearest(d1), e0], axis=1), emb)

        # decoder features next to the raw taps, combined under a
        # noise-level-conditioned linear gate, then the zero-init head
        inv = (1.0 / np.sqrt(np.maximum(1.0 - gam, 1e-12))).reshape(n, 1, 1, 1)
        stack = tt.concat([d0, z, i_t, i_t * inv], axis=1)
        gate = self.out_gate(emb).reshape((n, -1, 1, 1))
        c = stack.shape[1]
        stack = stack * (1.0 + gate[:, :c]) + gate[:, c:]
        out = self.head(stack)
        return out.reshape(out.shape[1:]) if single else out

    # -- parameter access -----------------------------------------------------

    def named_parameters(self):
        named = []
        if self.tmfa is not None:
            named += [(f"tmfa.{n}", p) for n, p in self.tmfa.parameters()]
        named += [(f"emb_fc1.{n}", p) for n, p in self.emb_fc1.parameters()]
        named += [(f"emb_fc2.{n}", p) for n, p in self.emb_fc2.parameters()]
        named += [(f"stem.{n}", p) for n, p in self.stem.parameters()]
        for i, block in enumerate(self.enc):
            named += [(f"enc{i}.{n}", p) for n, p in block.parameters()]
        named += [(f"attention.{n}", p) for n, p in self.attention.parameters()]
        for i, block in enumerate(self.dec):
            named += [(f"dec{i}.{n}", p) for n, p in block.parameters()]
        named += [(f"out_gate.{n}", p) for n, p in self.out_gate.parameters()]
        named += [(f"head.{n}", p) for n, p in self.head.parameters()]
        return named

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def eps_theta(z: Tensor, i_t: Tensor, gamma_t: float, net: FusionNet) -> Tensor:
    """Single-image noise prediction for a (3, H, W) latent."""
    if not 0.0 < gamma_t <= 1.0:
        raise ValueError(f"gamma_t must be in (0, 1], got {gamma_t}")
    return net.forward(z, i_t, float(gamma_t))


def count_parameters(net: FusionNet) -> int:
    """Exact count of trainable scalars."""
    return sum(p.size for p in net.parameters())


def tmfa_parameter_count(channels: int, reduction: int) -> int:
    """Closed-form TMFA size: two FC layers with biases around a ceil(C/r) bottleneck."""
    b = max(1, math.ceil(channels / reduction))
    return channels * b * 2 + b + channels
