"""Full-reference quality metrics and result-set evaluation.

All metrics operate on plain numpy arrays, by convention on the [0, 255]
values of the 8-bit files being compared, so a report is reproducible from
the files alone. Multi-channel images are scored per channel and averaged.
VIF is asymmetric: pass the reference first.

`evaluate_set` compares two directories with matching filenames and emits a
JSON report (schema-versioned) plus an aligned text table. Perceptual
scores (LPIPS) are never approximated here: they only appear when an
external scorer command is supplied.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from .data import load_image

REPORT_VERSION = 1
METRIC_COLUMNS = ("mse", "vif", "ssim", "psnr", "lpips", "mae", "rmse", "ag")

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_VIF_NOISE_VAR = 2.0
_VIF_EPS = 1e-10


class MetricsError(ValueError):
    """Inputs do not satisfy a metric's contract."""


def _planes(img) -> np.ndarray:
    """Any (H, W) or (C, H, W) input as float64 (C, H, W)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise MetricsError(f"expected (H, W) or (C, H, W) image, got shape {arr.shape}")
    return arr


def _pair(p, t) -> tuple[np.ndarray, np.ndarray]:
    p, t = _planes(p), _planes(t)
    if p.shape != t.shape:
        raise MetricsError(f"image shapes differ: {p.shape} vs {t.shape}")
    return p, t


# -- pixel statistics ---------------------------------------------------------


def ag(img) -> float:
    """Average gradient: mean magnitude of forward differences.

    A no-reference sharpness measure; 0 for constant images and invariant
    to intensity offsets.
    """
    arr = _planes(img)
    if arr.shape[1] < 2 or arr.shape[2] < 2:
        raise MetricsError(f"average gradient needs at least 2x2 pixels, got {arr.shape}")
    gx = arr[:, :-1, 1:] - arr[:, :-1, :-1]
    gy = arr[:, 1:, :-1] - arr[:, :-1, :-1]
    return float(np.sqrt((gx * gx + gy * gy) / 2.0).mean(axis=(1, 2)).mean())


def mse(p, t) -> float:
    p, t = _pair(p, t)
    return float(((p - t) ** 2).mean())


def mae(p, t) -> float:
    p, t = _pair(p, t)
    return float(np.abs(p - t).mean())


def rmse(p, t) -> float:
    return math.sqrt(mse(p, t))


def psnr(p, t, value_range: float = 255.0) -> float:
    """10*log10(range^2 / MSE); +inf for identical images."""
    if value_range <= 0:
        raise MetricsError(f"value_range must be positive, got {value_range}")
    err = mse(p, t)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(value_range * value_range / err)


# -- structural similarity -----------------------------------------------------


def _gaussian2d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_metric(p, t, value_range: float = 255.0) -> float:
    """Mean structural similarity over interior Gaussian windows.

    Same definition as the differentiable loss-mode index; this path is a
    plain numpy computation for evaluation use.
    """
    if value_range <= 0:
        raise MetricsError(f"value_range must be positive, got {value_range}")
    p, t = _pair(p, t)
    if p.shape[1] < _SSIM_WINDOW or p.shape[2] < _SSIM_WINDOW:
        raise MetricsError(f"image {p.shape[1:]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    win = _gaussian2d(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (0.01 * value_range) ** 2
    c2 = (0.03 * value_range) ** 2
    scores = []
    for pc, tc in zip(p, t):
        mu_p = correlate2d(pc, win, mode="valid")
        mu_t = correlate2d(tc, win, mode="valid")
        var_p = correlate2d(pc * pc, win, mode="valid") - mu_p * mu_p
        var_t = correlate2d(tc * tc, win, mode="valid") - mu_t * mu_t
        cov = correlate2d(pc * tc, win, mode="valid") - mu_p * mu_t
        num = (2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
        den = (mu_p * mu_p + mu_t * mu_t + c1) * (var_p + var_t + c2)
        scores.append((num / den).mean())
    return float(np.mean(scores))


# -- visual information fidelity -------------------------------------------------


def vif(ref, dist) -> float:
    """Pixel-domain visual information fidelity over a 4-scale pyramid.

    1.0 for a perfect copy of the reference, smaller for information loss;
    asymmetric, so the true reference must be the first argument. Images
    must be at least 32 pixels on every side.
    """
    ref, dist = _pair(ref, dist)
    if min(ref.shape[1], ref.shape[2]) < 32:
        raise MetricsError(f"VIF needs images of at least 32x32, got {ref.shape[1:]}")
    scores = [_vif_single(rc, dc) for rc, dc in zip(ref, dist)]
    return float(np.mean(scores))


def _vif_single(ref: np.ndarray, dist: np.ndarray) -> float:
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        size = 2 ** (4 - scale + 1) + 1
        win = _gaussian2d(size, size / 5.0)
        if scale > 1:
            if ref.shape[0] < size or ref.shape[1] < size:
                break
            ref = correlate2d(ref, win, mode="valid")[::2, ::2]
            dist = correlate2d(dist, win, mode="valid")[::2, ::2]
        if ref.shape[0] < size or ref.shape[1] < size:
            continue
        mu1 = correlate2d(ref, win, mode="valid")
        mu2 = correlate2d(dist, win, mode="valid")
        sigma1_sq = np.maximum(correlate2d(ref * ref, win, mode="valid") - mu1 * mu1, 0.0)
        sigma2_sq = np.maximum(correlate2d(dist * dist, win, mode="valid") - mu2 * mu2, 0.0)
        sigma12 = correlate2d(ref * dist, win, mode="valid") - mu1 * mu2

        g = sigma12 / (sigma1_sq + _VIF_EPS)
        sv_sq = sigma2_sq - g * sigma12

        low_ref = sigma1_sq < _VIF_EPS
        g[low_ref] = 0.0
        sv_sq[low_ref] = sigma2_sq[low_ref]
        sigma1_sq = np.where(low_ref, 0.0, sigma1_sq)

        low_dist = sigma2_sq < _VIF_EPS
        g[low_dist] = 0.0
        sv_sq[low_dist] = 0.0

        neg_gain = g < 0.0
        sv_sq[neg_gain] = sigma2_sq[neg_gain]
        g[neg_gain] = 0.0
        sv_sq = np.maximum(sv_sq, _VIF_EPS)

        num += np.log2(1.0 + g * g * sigma1_sq / (sv_sq + _VIF_NOISE_VAR)).sum()
        den += np.log2(1.0 + sigma1_sq / _VIF_NOISE_VAR).sum()
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    return num / den


# -- result-set evaluation ---------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-image metric records plus their arithmetic means."""

    value_range: float
    results_dir: str
    gt_dir: str
    images: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    schema_version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return _jsonable({
            "schema_version": self.schema_version,
            "value_range": self.value_range,
            "results_dir": self.results_dir,
            "gt_dir": self.gt_dir,
            "images": self.images,
            "mean": self.mean,
            "skipped": self.skipped,
        })

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def render_table(self) -> str:
        headers = ["image"] + [c.upper() for c in METRIC_COLUMNS]
        rows = [[rec["id"]] + [_fmt(rec[c]) for c in METRIC_COLUMNS] for rec in self.images]
        rows.append(["mean"] + [_fmt(self.mean.get(c)) for c in METRIC_COLUMNS])
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
        lines.append("  ".join("-" * w for w in widths))
        lines.extend("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows)
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def _run_lpips(cmd: str, result_path: Path, gt_path: Path) -> float:
    argv = shlex.split(cmd) + [str(result_path), str(gt_path)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, check=True, timeout=300)
    except (OSError, subprocess.SubprocessError) as exc:
        raise MetricsError(f"LPIPS command failed for {result_path.name}: {exc}") from exc
    try:
        return float(proc.stdout.strip().splitlines()[-1])
    except (IndexError, ValueError) as exc:
        raise MetricsError(
            f"LPIPS command printed no parseable number for {result_path.name}: {proc.stdout!r}"
        ) from exc


def image_metrics(result: np.ndarray, gt: np.ndarray, value_range: float) -> dict:
    """All full-reference scores for one (result, reference) pair."""
    err = mse(result, gt)
    return {
        "mse": err,
        "vif": vif(gt, result),
        "ssim": ssim_metric(result, gt, value_range),
        "psnr": math.inf if err == 0.0 else 10.0 * math.log10(value_range * value_range / err),
        "mae": mae(result, gt),
        "rmse": math.sqrt(err),
        "ag": ag(result),
    }


def evaluate_set(results_dir, gt_dir, value_range: float = 255.0, lpips_cmd: str | None = None,
                 allow_partial: bool = False) -> MetricsReport:
    """Score every result image against the reference with the same filename.

    Filenames present on only one side abort the run (they are all listed)
    unless `allow_partial`, in which case the intersection is scored and the
    mismatch recorded in the report.
    """
    results_dir, gt_dir = Path(results_dir), Path(gt_dir)
    for d in (results_dir, gt_dir):
        if not d.is_dir():
            raise MetricsError(f"directory not found: {d}")
    result_names = {p.name for p in results_dir.glob("*.png")}
    gt_names = {p.name for p in gt_dir.glob("*.png")}
    results_only = sorted(result_names - gt_names)
    gt_only = sorted(gt_names - result_names)
    common = sorted(result_names & gt_names)
    if (results_only or gt_only) and not allow_partial:
        raise MetricsError(
            "unmatched files between directories; "
            f"results-only: {results_only or '[]'}, reference-only: {gt_only or '[]'}"
        )
    if not common:
        raise MetricsError(f"no common .png files between {results_dir} and {gt_dir}")

    report = MetricsReport(
        value_range=float(value_range),
        results_dir=str(results_dir),
        gt_dir=str(gt_dir),
        skipped={"results_only": results_only, "gt_only": gt_only},
    )
    for name in common:
        result = load_image(results_dir / name) * value_range
        gt = load_image(gt_dir / name) * value_range
        record = {"id": name}
        record.update(image_metrics(result, gt, value_range))
        record["lpips"] = _run_lpips(lpips_cmd, results_dir / name, gt_dir / name) if lpips_cmd else None
        report.images.append(record)

    for col in METRIC_COLUMNS:
        values = [rec[col] for rec in report.images]
        report.mean[col] = None if any(v is None for v in values) else float(np.mean(values))
    return report
