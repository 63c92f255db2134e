import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from trifuse import data as dt
from trifuse.data import (
    DatasetError,
    DatasetManifest,
    TriModalSample,
    build_dataset,
    load_image,
    load_sample,
    load_split,
    make_synthetic_source,
    save_image,
    synthetic_sample_arrays,
)


def _tree_checksums(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestImageIO:
    def test_roundtrip_grayscale(self, tmp_path):
        img = np.round(np.random.default_rng(0).uniform(size=(1, 8, 8)) * 255) / 255
        path = tmp_path / "g.png"
        save_image(img, path)
        assert np.allclose(load_image(path), img, atol=1e-12)

    def test_roundtrip_rgb(self, tmp_path):
        img = np.round(np.random.default_rng(1).uniform(size=(3, 8, 8)) * 255) / 255
        path = tmp_path / "c.png"
        save_image(img, path)
        assert np.allclose(load_image(path), img, atol=1e-12)

    def test_bad_channel_count_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            save_image(np.zeros((2, 4, 4)), tmp_path / "x.png")


class TestSynthetic:
    def test_arrays_shapes_and_ranges(self):
        x, y, s, gt = synthetic_sample_arrays(np.random.default_rng(2), 32)
        for m in (x, y, s):
            assert m.shape == (1, 32, 32)
            assert m.min() >= 0.0 and m.max() <= 1.0
        assert gt.shape == (3, 32, 32)

    def test_gt_is_max_projection(self):
        x, y, s, gt = synthetic_sample_arrays(np.random.default_rng(3), 16)
        expect = np.maximum(np.maximum(x, y), s)
        for c in range(3):
            assert np.array_equal(gt[c], expect[0])

    def test_source_layout(self, tmp_path):
        ids = make_synthetic_source(tmp_path / "src", count=3, size=16, seed=4)
        assert ids == ["s000", "s001", "s002"]
        sample = tmp_path / "src" / "s001"
        for name in ("x.png", "y.png", "s.png", "gt.png", "meta.json"):
            assert (sample / name).is_file()
        meta = json.loads((sample / "meta.json").read_text())
        assert meta["modalities"] in dt.MODALITY_CONFIGS

    def test_unknown_modality_config_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            make_synthetic_source(tmp_path / "src", 1, 16, 0, modality_config="CT/CT/CT")


class TestSampleValidation:
    def _arrays(self, size=16, scale=2):
        rng = np.random.default_rng(5)
        x, y, s, gt = synthetic_sample_arrays(rng, size)
        from trifuse.resample import bicubic_resample

        low = size // scale
        return dict(
            id="t",
            x=bicubic_resample(x, low, low),
            y=bicubic_resample(y, low, low),
            s=bicubic_resample(s, low, low),
            gt=gt,
            scale=scale,
        )

    def test_valid_sample_accepted(self):
        TriModalSample(**self._arrays())

    def test_gt_size_must_match_scale(self):
        kw = self._arrays()
        kw["scale"] = 4
        with pytest.raises(DatasetError, match="scale"):
            TriModalSample(**kw)

    def test_out_of_range_values_rejected(self):
        kw = self._arrays()
        kw["x"] = kw["x"] + 2.0
        with pytest.raises(DatasetError, match=r"\[0, 1\]"):
            TriModalSample(**kw)

    def test_conditioning_stack_properties(self):
        sample = TriModalSample(**self._arrays())
        cond = sample.conditioning_stack()
        assert cond.shape == (3, 16, 16)
        assert cond.min() >= -1.0 and cond.max() <= 1.0
        assert sample.conditioning_stack() is cond  # cached

    def test_gt_normalized_range(self):
        sample = TriModalSample(**self._arrays())
        gt = sample.gt_normalized()
        assert gt.min() >= -1.0 and gt.max() <= 1.0


class TestBuildDataset:
    def test_expected_dimensions_per_scale(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=2, size=64, seed=6)
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(2, 4, 8), seed=0)
        assert manifest.scales == (2, 4, 8)
        for scale in (2, 4, 8):
            img = load_image(tmp_path / "out" / f"x{scale}" / "s000" / "x.png")
            assert img.shape == (1, 64 // scale, 64 // scale)
            gt = load_image(tmp_path / "out" / f"x{scale}" / "s000" / "gt.png")
            assert gt.shape == (3, 64, 64)

    def test_split_sizes_default_ratio(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=17, size=16, seed=7)
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(2,), seed=1)
        sizes = {k: len(v) for k, v in manifest.split.items()}
        assert sum(sizes.values()) == 17
        ids = sum((manifest.split[k] for k in ("train", "val", "test")), [])
        assert len(set(ids)) == 17  # disjoint and covering

    def test_same_seed_same_manifest(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=6, size=16, seed=8)
        a = build_dataset(tmp_path / "src", tmp_path / "a", scales=(2,), seed=5)
        b = build_dataset(tmp_path / "src", tmp_path / "b", scales=(2,), seed=5)
        assert a.split == b.split
        assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()

    def test_different_seed_changes_split(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=12, size=16, seed=9)
        a = build_dataset(tmp_path / "src", tmp_path / "a", scales=(2,), ratio=(8, 2, 2), seed=1)
        b = build_dataset(tmp_path / "src", tmp_path / "b", scales=(2,), ratio=(8, 2, 2), seed=2)
        assert a.split != b.split

    def test_idempotent_rebuild(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=3, size=32, seed=10)
        build_dataset(tmp_path / "src", tmp_path / "out", scales=(2, 4), seed=3)
        first = _tree_checksums(tmp_path / "out")
        build_dataset(tmp_path / "src", tmp_path / "out", scales=(2, 4), seed=3)
        assert _tree_checksums(tmp_path / "out") == first

    def test_missing_files_rejected_and_listed(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=3, size=16, seed=11)
        (tmp_path / "src" / "s001" / "y.png").unlink()
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(2,), seed=0)
        assert [r["id"] for r in manifest.rejected] == ["s001"]
        assert "y.png" in manifest.rejected[0]["reason"]
        assert "s001" not in manifest.samples

    def test_indivisible_gt_rejected(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=1, size=20, seed=12)  # 20 % 8 != 0
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(8,), seed=0)
        assert len(manifest.rejected) == 1

    def test_constant_image_survives_all_scales(self, tmp_path):
        src = tmp_path / "src" / "c000"
        save_image(np.full((1, 32, 32), 0.5), src / "x.png")
        save_image(np.full((1, 32, 32), 0.5), src / "y.png")
        save_image(np.full((1, 32, 32), 0.5), src / "s.png")
        save_image(np.full((3, 32, 32), 0.5), src / "gt.png")
        build_dataset(tmp_path / "src", tmp_path / "out", scales=(2, 4, 8), seed=0)
        for scale in (2, 4, 8):
            img = load_image(tmp_path / "out" / f"x{scale}" / "c000" / "x.png")
            assert np.allclose(img, 0.5, atol=1 / 255)

    def test_source_checksums_recorded(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=1, size=16, seed=13)
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(2,), seed=0)
        sums = manifest.samples["s000"]["checksums"]
        expect = hashlib.sha256((tmp_path / "src" / "s000" / "x.png").read_bytes()).hexdigest()
        assert sums["x.png"] == expect

    def test_unsupported_scale_rejected(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=1, size=16, seed=14)
        with pytest.raises(DatasetError, match="scale"):
            build_dataset(tmp_path / "src", tmp_path / "out", scales=(3,), seed=0)

    def test_missing_source_dir_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="source"):
            build_dataset(tmp_path / "nope", tmp_path / "out")


class TestManifestAndLoading:
    def test_manifest_roundtrip(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=4, size=16, seed=15)
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(2,), ratio=(2, 1, 1), seed=0)
        loaded = DatasetManifest.load(tmp_path / "out" / "manifest.json")
        assert loaded == manifest

    def test_load_sample_and_split(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=4, size=16, seed=16)
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(2,), ratio=(2, 1, 1), seed=0)
        sample = load_sample(tmp_path / "out", 2, manifest.split_ids("train")[0])
        assert sample.x.shape == (1, 8, 8)
        assert sample.gt.shape == (3, 16, 16)
        train = load_split(tmp_path / "out", manifest, 2, "train")
        assert len(train) == 2

    def test_unknown_split_rejected(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=2, size=16, seed=17)
        manifest = build_dataset(tmp_path / "src", tmp_path / "out", scales=(2,), ratio=(1, 1, 0), seed=0)
        with pytest.raises(DatasetError, match="split"):
            manifest.split_ids("dev")

    def test_missing_sample_dir_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="sample"):
            load_sample(tmp_path, 2, "missing")
