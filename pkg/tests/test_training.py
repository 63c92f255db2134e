import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from trifuse.config import resolve_config
from trifuse.data import DatasetError, build_dataset, load_image, make_synthetic_source
from trifuse.tensor import Tensor
from trifuse.training import (
    Adam,
    CheckpointError,
    TrainingError,
    ablation_variants,
    ablate,
    fuse_images,
    load_checkpoint,
    save_checkpoint,
    train,
)

TINY = {"T": 5, "widths": "4,4,4,4", "batch_size": 2, "total_steps": 8, "seed": 1}


@pytest.fixture()
def dataset(tmp_path):
    make_synthetic_source(tmp_path / "src", count=3, size=32, seed=21)
    build_dataset(tmp_path / "src", tmp_path / "data", scales=(4,), ratio=(1, 0, 0), seed=0)
    return tmp_path / "data"


def _read_log(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


class TestAdam:
    def test_minimizes_quadratic(self):
        x = Tensor(np.array([10.0]), requires_grad=True)
        opt = Adam([x], lr=0.5)
        for _ in range(200):
            opt.zero_grad()
            loss = (x - 3.0) * (x - 3.0)
            loss.sum().backward()
            opt.step()
        assert abs(x.data[0] - 3.0) < 1e-3

    def test_bias_correction_first_step(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        opt.zero_grad()
        (2.0 * x).sum().backward()
        opt.step()
        # first step moves by ~lr regardless of gradient magnitude
        assert x.data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)


class TestTrainRun:
    def test_deterministic_loss_log(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=TINY)
        a = train(cfg, dataset, tmp_path / "a")
        b = train(cfg, dataset, tmp_path / "b")
        assert Path(a.loss_log_path).read_text() == Path(b.loss_log_path).read_text()
        assert Path(a.checkpoint_path).read_bytes() == Path(b.checkpoint_path).read_bytes()

    def test_loss_log_has_components(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=TINY)
        result = train(cfg, dataset, tmp_path / "run")
        log = _read_log(result.loss_log_path)
        assert [rec["step"] for rec in log] == list(range(1, 9))
        assert all(rec["loss"] >= 0 and rec["psf"] >= 0 for rec in log)

    def test_empty_train_split_rejected(self, tmp_path):
        make_synthetic_source(tmp_path / "src", count=2, size=32, seed=22)
        build_dataset(tmp_path / "src", tmp_path / "data", scales=(4,), ratio=(0, 1, 1), seed=0)
        cfg = resolve_config("toy", overrides=TINY)
        with pytest.raises(DatasetError, match="empty"):
            train(cfg, tmp_path / "data", tmp_path / "run")

    def test_disabled_tmfa_trains_with_smaller_count(self, dataset, tmp_path):
        base = resolve_config("toy", overrides=TINY)
        off = dataclasses.replace(base, tmfa_enabled=False)
        a = train(base, dataset, tmp_path / "a")
        b = train(off, dataset, tmp_path / "b")
        from trifuse.network import tmfa_parameter_count

        assert a.parameter_count - b.parameter_count == tmfa_parameter_count(3, base.reduction)

    def test_nonfinite_loss_aborts_with_diagnostics(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=dict(TINY, lr="1e18", total_steps="50"))
        with np.errstate(all="ignore"), pytest.raises(TrainingError, match="step"):
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                train(cfg, dataset, tmp_path / "run")


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=TINY)
        result = train(cfg, dataset, tmp_path / "run")
        ck = load_checkpoint(result.checkpoint_path)
        copy_path = tmp_path / "copy.ckpt"
        save_checkpoint(ck, copy_path)
        assert copy_path.read_bytes() == Path(result.checkpoint_path).read_bytes()

    def test_resume_reproduces_loss_sequence(self, dataset, tmp_path):
        full_cfg = resolve_config("toy", overrides=dict(TINY, total_steps="12"))
        full = train(full_cfg, dataset, tmp_path / "full")

        half_cfg = resolve_config("toy", overrides=dict(TINY, total_steps="12", checkpoint_every="6"))
        train(half_cfg, dataset, tmp_path / "half")
        mid = tmp_path / "half" / "checkpoint_0000006.ckpt"
        assert mid.is_file()
        resumed = train(half_cfg, dataset, tmp_path / "resumed", resume=mid)

        full_log = _read_log(full.loss_log_path)
        resumed_log = _read_log(resumed.loss_log_path)
        assert [r["step"] for r in resumed_log] == list(range(7, 13))
        tail = {r["step"]: r for r in full_log if r["step"] > 6}
        for rec in resumed_log:
            assert rec == tail[rec["step"]]

    def test_resume_from_final_checkpoint_matches_uninterrupted(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=dict(TINY, total_steps="10", checkpoint_every="5"))
        uninterrupted = train(cfg, dataset, tmp_path / "one")
        resumed = train(cfg, dataset, tmp_path / "two", resume=tmp_path / "one" / "checkpoint_0000005.ckpt")
        assert Path(resumed.checkpoint_path).read_bytes() == Path(uninterrupted.checkpoint_path).read_bytes()

    def test_config_mismatch_rejected(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=TINY)
        result = train(cfg, dataset, tmp_path / "run")
        other = resolve_config("toy", overrides=dict(TINY, lr="2e-4"))
        with pytest.raises(CheckpointError, match="configuration"):
            train(other, dataset, tmp_path / "other", resume=result.checkpoint_path)

    def test_corrupt_file_rejected(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(bad)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "none.ckpt")


class TestFuse:
    @pytest.fixture()
    def trained(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=TINY)
        result = train(cfg, dataset, tmp_path / "run")
        return dataset, Path(result.checkpoint_path), tmp_path

    def test_byte_identical_for_same_seed(self, trained):
        data, ckpt, tmp = trained
        sdir = data / "x4" / "s000"
        out_a, out_b = tmp / "a.png", tmp / "b.png"
        fuse_images(ckpt, sdir / "x.png", sdir / "y.png", sdir / "s.png", out_a, seed=9)
        fuse_images(ckpt, sdir / "x.png", sdir / "y.png", sdir / "s.png", out_b, seed=9)
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_different_seed_changes_output(self, trained):
        data, ckpt, tmp = trained
        sdir = data / "x4" / "s000"
        out_a, out_b = tmp / "a.png", tmp / "b.png"
        fuse_images(ckpt, sdir / "x.png", sdir / "y.png", sdir / "s.png", out_a, seed=1)
        fuse_images(ckpt, sdir / "x.png", sdir / "y.png", sdir / "s.png", out_b, seed=2)
        assert out_a.read_bytes() != out_b.read_bytes()

    def test_output_dimensions_scale_input(self, trained):
        data, ckpt, tmp = trained
        sdir = data / "x4" / "s001"
        out = tmp / "fused.png"
        result = fuse_images(ckpt, sdir / "x.png", sdir / "y.png", sdir / "s.png", out, seed=3)
        assert result.steps == 5
        img = load_image(out)
        low = load_image(sdir / "x.png")
        assert img.shape == (3, low.shape[1] * 4, low.shape[2] * 4)

    def test_incompatible_size_reports_required_multiple(self, trained, tmp_path):
        from trifuse.data import save_image

        data, ckpt, tmp = trained
        odd = tmp_path / "odd.png"
        save_image(np.full((1, 9, 9), 0.5), odd)
        with pytest.raises(DatasetError, match="multiples of 2"):
            fuse_images(ckpt, odd, odd, odd, tmp_path / "o.png", seed=0)


class TestAblate:
    def test_variants_differ_in_exactly_one_field(self):
        cfg = resolve_config("toy")
        variants = dict(ablation_variants(cfg))
        base = variants["baseline"].to_fields()
        for name, field in (("no_tmfa", "tmfa_enabled"), ("no_psf", "psf_enabled")):
            fields = variants[name].to_fields()
            diff = {k for k in base if base[k] != fields[k]}
            assert diff == {field}
            assert fields[field] is False

    def test_single_command_produces_summary_and_reports(self, dataset, tmp_path):
        cfg = resolve_config("toy", overrides=TINY)
        result = ablate(cfg, dataset, tmp_path / "ablate", split="train")
        summary = json.loads(Path(result.summary_path).read_text())
        assert set(summary["variants"]) == {"baseline", "no_tmfa", "no_psf"}
        table = Path(result.table_path).read_text()
        assert table.splitlines()[0].split() == [
            "variant", "VIF", "SSIM", "PSNR", "AG", "MSE", "LPIPS", "MAE", "RMSE"]
        for name in ("baseline", "no_tmfa", "no_psf"):
            assert (tmp_path / "ablate" / name / "report.json").is_file()
            assert (tmp_path / "ablate" / name / "checkpoint.ckpt").is_file()
            assert summary["variants"][name]["mean"]["ssim"] is not None
