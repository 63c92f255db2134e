"""Bicubic image resampling (Catmull-Rom kernel, half-pixel centers).

Used both to build the low-resolution training inputs and to upsample
conditioning images back to target resolution. Operates on plain numpy
arrays in [0, 1]; resampling is separable, implemented as one weight
matrix per axis so a resize is two matrix products per channel.
"""

from __future__ import annotations

import numpy as np

_A = -0.5  # Catmull-Rom


def cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic convolution kernel with a = -0.5; zero outside |t| >= 2."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (_A + 2.0) * t[near] ** 3 - (_A + 3.0) * t[near] ** 2 + 1.0
    out[far] = _A * t[far] ** 3 - 5.0 * _A * t[far] ** 2 + 8.0 * _A * t[far] - 4.0 * _A
    return out


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weight matrix for 1-D bicubic resampling.

    Output sample o reads the source at u = (o + 0.5) * n_in / n_out - 0.5;
    the four taps around u get cubic weights and out-of-range taps clamp to
    the edge, so each row sums to exactly 1.
    """
    scale = n_in / n_out
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(-1, 3):
        w = cubic_kernel(frac - tap)
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (np.arange(n_out), idx), w)
    return mat


def bicubic_resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a (C, H, W) or (H, W) image to (out_h, out_w), clamped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    rows = np.eye(h) if out_h == h else resample_matrix(h, out_h)
    cols = np.eye(w) if out_w == w else resample_matrix(w, out_w)
    out = np.einsum("oh,chw,pw->cop", rows, img, cols, optimize=True)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out
