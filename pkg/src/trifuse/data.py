"""Dataset construction and sample handling.

A source tree holds one directory per sample with three registered
single-channel modality images plus an externally produced high-resolution
3-channel ground-truth fusion:

    src/<sample-id>/x.png  y.png  s.png  gt.png  [meta.json]

`build_dataset` downsamples the modalities bicubically for each requested
magnification, re-encodes everything as 8-bit PNG under `out/x<scale>/`,
and writes a versioned manifest with a deterministic train/val/test split.

The synthetic generator exists so the pipeline can be exercised end to end
without clinical data: smooth random fields stand in for modalities and the
ground truth is simply their per-pixel maximum rendered into three
channels. It is a test fixture, not a fusion method.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .resample import bicubic_resample

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
MODALITY_FILES = ("x.png", "y.png", "s.png")
GT_FILE = "gt.png"

MODALITY_CONFIGS = (
    "MR-T2/MR-Gad/PET",
    "CT/MR-T2/SPECT",
    "MR-T1/MR-T2/PET",
    "MR-T2/MR-Gad/SPECT",
    "MR-T1/MR-T2/SPECT",
)
DEFAULT_MODALITIES = "MR-T1/MR-T2/SPECT"


class DatasetError(ValueError):
    """A source tree or manifest does not satisfy the dataset contract."""


# -- image io ------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """PNG to float array in [0, 1]: (1, H, W) for grayscale, (3, H, W) for RGB."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)[None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    return arr / 255.0


def save_image(arr: np.ndarray, path) -> None:
    """Quantize a [0, 1] (1, H, W) or (3, H, W) array to 8-bit PNG."""
    arr = np.asarray(arr, dtype=np.float64)
    quant = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if quant.shape[0] == 1:
        im = Image.fromarray(quant[0], mode="L")
    elif quant.shape[0] == 3:
        im = Image.fromarray(quant.transpose(1, 2, 0), mode="RGB")
    else:
        raise DatasetError(f"expected 1 or 3 channels, got shape {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# -- samples --------------------------------------------------------------------


@dataclass
class TriModalSample:
    """One training/eval unit: three low-res modalities plus the hi-res fusion."""

    id: str
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    gt: np.ndarray | None
    scale: int
    modality_config: str = DEFAULT_MODALITIES
    _cond: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name, m in (("x", self.x), ("y", self.y), ("s", self.s)):
            if m.ndim != 3 or m.shape[0] != 1:
                raise DatasetError(f"{self.id}: modality {name} must be (1, h, w), got {m.shape}")
            if m.shape != self.x.shape:
                raise DatasetError(f"{self.id}: modality shapes differ")
        if self.gt is not None:
            if self.gt.ndim != 3 or self.gt.shape[0] != 3:
                raise DatasetError(f"{self.id}: ground truth must be (3, H, W), got {self.gt.shape}")
            expect = (self.x.shape[1] * self.scale, self.x.shape[2] * self.scale)
            if self.gt.shape[1:] != expect:
                raise DatasetError(
                    f"{self.id}: ground truth {self.gt.shape[1:]} != low-res x scale {expect}"
                )
        for name, m in (("x", self.x), ("y", self.y), ("s", self.s), ("gt", self.gt)):
            if m is not None and (m.min() < 0.0 or m.max() > 1.0):
                raise DatasetError(f"{self.id}: {name} has values outside [0, 1]")

    def conditioning_stack(self) -> np.ndarray:
        """Bicubically upsampled modalities stacked to (3, H, W) in [-1, 1]; cached."""
        if self._cond is None:
            h = self.x.shape[1] * self.scale
            w = self.x.shape[2] * self.scale
            up = np.concatenate(
                [bicubic_resample(m, h, w) for m in (self.x, self.y, self.s)], axis=0
            )
            self._cond = 2.0 * up - 1.0
        return self._cond

    def gt_normalized(self) -> np.ndarray:
        if self.gt is None:
            raise DatasetError(f"{self.id}: sample has no ground truth")
        return 2.0 * self.gt - 1.0


# -- synthetic source -------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, size: int, bumps: int = 4) -> np.ndarray:
    """Random smooth [0.05, 0.95] field: a few Gaussian blobs over a gentle ramp."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = rng.uniform(0.0, 0.3) * xx + rng.uniform(0.0, 0.3) * yy
    for _ in range(bumps):
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        sig = rng.uniform(0.08, 0.25)
        amp = rng.uniform(0.4, 1.0)
        img = img + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sig * sig))
    img = img - img.min()
    img = img / max(img.max(), 1e-9)
    return (0.05 + 0.9 * img)[None]


def synthetic_sample_arrays(rng: np.random.Generator, size: int):
    """Three synthetic modalities plus their max-projection ground truth."""
    x, y, s = (_smooth_field(rng, size) for _ in range(3))
    gt = np.repeat(np.maximum(np.maximum(x, y), s), 3, axis=0)
    return x, y, s, gt


def make_synthetic_source(dst, count: int, size: int, seed: int,
                          modality_config: str = DEFAULT_MODALITIES) -> list[str]:
    """Write `count` synthetic sample directories under `dst`; returns ids."""
    if modality_config not in MODALITY_CONFIGS:
        raise DatasetError(f"unknown modality configuration {modality_config!r}")
    dst = Path(dst)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(count):
        sample_id = f"s{i:03d}"
        x, y, s, gt = synthetic_sample_arrays(rng, size)
        sample_dir = dst / sample_id
        for name, arr in zip(MODALITY_FILES, (x, y, s)):
            save_image(arr, sample_dir / name)
        save_image(gt, sample_dir / GT_FILE)
        (sample_dir / "meta.json").write_text(
            json.dumps({"modalities": modality_config}, indent=2) + "\n"
        )
        ids.append(sample_id)
    return ids


# -- manifest ----------------------------------------------------------------------


@dataclass
class DatasetManifest:
    seed: int
    ratio: tuple[int, int, int]
    scales: tuple[int, ...]
    split: dict
    samples: dict
    rejected: list
    schema_version: int = MANIFEST_VERSION

    def split_ids(self, name: str) -> list[str]:
        if name not in self.split:
            raise DatasetError(f"unknown split {name!r}; have {sorted(self.split)}")
        return list(self.split[name])

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "ratio": list(self.ratio),
            "scales": list(self.scales),
            "split": self.split,
            "samples": self.samples,
            "rejected": self.rejected,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}")
        if raw.get("schema_version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {raw.get('schema_version')}")
        return cls(
            seed=raw["seed"],
            ratio=tuple(raw["ratio"]),
            scales=tuple(raw["scales"]),
            split=raw["split"],
            samples=raw["samples"],
            rejected=raw["rejected"],
        )


def _split_sizes(n: int, ratio: tuple[int, int, int]) -> tuple[int, int, int]:
    """Exact when n == sum(ratio), otherwise largest-remainder apportionment."""
    total = sum(ratio)
    if n == total:
        return tuple(ratio)
    exact = [n * r / total for r in ratio]
    sizes = [int(e) for e in exact]
    remainders = sorted(range(3), key=lambda i: exact[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1
    return tuple(sizes)


def build_dataset(src_dir, out_dir, scales=(2, 4, 8), ratio=(84, 10, 25), seed: int = 0) -> DatasetManifest:
    """Downsample every valid sample for each scale and write a split manifest.

    Samples missing a modality or ground-truth file, or whose ground truth
    is not divisible by every requested scale, are skipped and listed in the
    manifest's `rejected` section. Rerunning with the same inputs and seed
    rewrites identical bytes.
    """
    src = Path(src_dir)
    out = Path(out_dir)
    if not src.is_dir():
        raise DatasetError(f"source directory not found: {src}")
    scales = tuple(sorted(int(s) for s in scales))
    for s in scales:
        if s not in (2, 4, 8):
            raise DatasetError(f"unsupported scale {s}; choose from 2, 4, 8")

    accepted: dict[str, dict] = {}
    rejected: list[dict] = []
    for sample_dir in sorted(p for p in src.iterdir() if p.is_dir()):
        sample_id = sample_dir.name
        missing = [f for f in (*MODALITY_FILES, GT_FILE) if not (sample_dir / f).is_file()]
        if missing:
            rejected.append({"id": sample_id, "reason": f"missing files: {', '.join(missing)}"})
            continue
        gt = load_image(sample_dir / GT_FILE)
        if gt.shape[0] == 1:
            gt = np.repeat(gt, 3, axis=0)
        h, w = gt.shape[1:]
        bad = [s for s in scales if h % s or w % s]
        if bad:
            rejected.append({"id": sample_id, "reason": f"ground truth {h}x{w} not divisible by scales {bad}"})
            continue
        modalities = DEFAULT_MODALITIES
        meta_path = sample_dir / "meta.json"
        if meta_path.is_file():
            modalities = json.loads(meta_path.read_text()).get("modalities", DEFAULT_MODALITIES)
        accepted[sample_id] = {
            "dir": sample_dir,
            "gt": gt,
            "modalities": modalities,
            "checksums": {f: _sha256(sample_dir / f) for f in (*MODALITY_FILES, GT_FILE)},
        }

    ids = sorted(accepted)
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_train, n_val, n_test = _split_sizes(len(ids), tuple(ratio))
    split = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:n_train + n_val + n_test]),
    }

    for sample_id, info in accepted.items():
        gt = info["gt"]
        h, w = gt.shape[1:]
        mods = {f: load_image(info["dir"] / f) for f in MODALITY_FILES}
        for scale in scales:
            scale_dir = out / f"x{scale}" / sample_id
            for fname, m in mods.items():
                save_image(bicubic_resample(m, h // scale, w // scale), scale_dir / fname)
            save_image(gt, scale_dir / GT_FILE)

    manifest = DatasetManifest(
        seed=seed,
        ratio=tuple(ratio),
        scales=scales,
        split=split,
        samples={
            sid: {"modalities": info["modalities"], "checksums": info["checksums"]}
            for sid, info in accepted.items()
        },
        rejected=rejected,
    )
    manifest.save(out / MANIFEST_NAME)
    return manifest


def load_sample(data_dir, scale: int, sample_id: str,
                modality_config: str = DEFAULT_MODALITIES) -> TriModalSample:
    """Read one prepared sample from `data_dir/x<scale>/<sample_id>/`."""
    sample_dir = Path(data_dir) / f"x{scale}" / sample_id
    if not sample_dir.is_dir():
        raise DatasetError(f"sample directory not found: {sample_dir}")
    x, y, s = (load_image(sample_dir / f) for f in MODALITY_FILES)
    gt_path = sample_dir / GT_FILE
    gt = load_image(gt_path) if gt_path.is_file() else None
    if gt is not None and gt.shape[0] == 1:
        gt = np.repeat(gt, 3, axis=0)
    return TriModalSample(id=sample_id, x=x, y=y, s=s, gt=gt, scale=int(scale),
                          modality_config=modality_config)


def load_split(data_dir, manifest: DatasetManifest, scale: int, split: str) -> list[TriModalSample]:
    ids = manifest.split_ids(split)
    return [
        load_sample(data_dir, scale, sid,
                    manifest.samples.get(sid, {}).get("modalities", DEFAULT_MODALITIES))
        for sid in ids
    ]
