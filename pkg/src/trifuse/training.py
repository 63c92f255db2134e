"""Training loop, optimizer, checkpointing, fusion and ablation runs.

Everything here is deterministic for a fixed (seed, config, data): one
generator drives initialization, batch selection, the per-step (t, eps)
draws and sampling noise, its exact state is serialized into checkpoints,
and checkpoints themselves are a fixed-layout binary container so saving
the same state twice yields identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, render_config
from .data import (
    GT_FILE,
    DatasetError,
    DatasetManifest,
    MANIFEST_NAME,
    load_image,
    load_split,
    save_image,
)
from .diffusion import build_schedule, predict_x0, sample_fusion
from .metrics import MetricsReport, evaluate_set
from .network import FusionNet, count_parameters
from .objectives import LossWeights, psf_loss
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TRIFUSE1"
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.ckpt"
LOSS_LOG_NAME = "loss_log.jsonl"
LOSS_WINDOW = 50  # smoothing window for reported training loss


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or inconsistent resume)."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, corrupt, or incompatible."""


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict  # {"fields": resolved TrainConfig, "config_text": echo, "profile": name}
    step: int
    rng_state: dict
    params: dict
    adam_m: dict
    adam_v: dict
    adam_steps: int
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(ck: Checkpoint, path) -> None:
    arrays = []
    for section, table in (("params", ck.params), ("adam_m", ck.adam_m), ("adam_v", ck.adam_v)):
        for name, arr in table.items():
            arrays.append((f"{section}/{name}", np.ascontiguousarray(arr, dtype="<f8")))
    header = {
        "format_version": ck.format_version,
        "config": ck.config,
        "step": ck.step,
        "rng_state": ck.rng_state,
        "adam_steps": ck.adam_steps,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    offset += header_len
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    tables = {"params": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
        section, name = entry["name"].split("/", 1)
        tables[section][name] = arr
    return Checkpoint(
        config=header["config"],
        step=header["step"],
        rng_state=header["rng_state"],
        params=tables["params"],
        adam_m=tables["adam_m"],
        adam_v=tables["adam_v"],
        adam_steps=header["adam_steps"],
    )


def config_from_checkpoint(ck: Checkpoint) -> TrainConfig:
    fields = dict(ck.config["fields"])
    fields["widths"] = tuple(fields["widths"])
    return TrainConfig(**fields).validate()


def build_net(cfg: TrainConfig, rng: np.random.Generator) -> FusionNet:
    return FusionNet(
        widths=cfg.widths,
        tmfa_enabled=cfg.tmfa_enabled,
        reduction=cfg.reduction,
        rng=rng,
    )


def _apply_params(net: FusionNet, params: dict) -> None:
    named = dict(net.named_parameters())
    if set(named) != set(params):
        missing = sorted(set(named) ^ set(params))
        raise CheckpointError(f"checkpoint parameters do not match the network: {missing}")
    for name, arr in params.items():
        if named[name].data.shape != arr.shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {named[name].data.shape}")
        named[name].data = arr.astype(np.float64, copy=True)


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log_path: str
    steps: int
    final_loss: float  # mean over the last LOSS_WINDOW logged steps
    parameter_count: int


def _batch_loss(net, conds, gts, sched, weights, rng, batch_indices):
    """Training loss over one batch; draw order is (t, eps) per member."""
    gammas = np.empty(len(batch_indices))
    i_t = np.empty((len(batch_indices),) + gts[0].shape)
    eps = np.empty_like(i_t)
    for row, idx in enumerate(batch_indices):
        t = int(rng.integers(1, sched.T + 1))
        gammas[row] = sched.gamma_at(t)
        eps[row] = rng.standard_normal(gts[idx].shape)
        i_t[row] = np.sqrt(gammas[row]) * gts[idx] + np.sqrt(1.0 - gammas[row]) * eps[row]

    cond_batch = Tensor(np.stack([conds[i] for i in batch_indices]))
    gt_batch = Tensor(np.stack([gts[i] for i in batch_indices]))
    z = net.conditioning(cond_batch)
    eps_hat = net.forward(z, Tensor(i_t), gammas)
    diff = Tensor(eps) - eps_hat
    objective = (diff * diff).mean()
    if not weights.psf_enabled:
        return objective, float(objective.data), 0.0
    x0_hat = predict_x0(Tensor(i_t), eps_hat, gammas)
    psf = psf_loss(x0_hat, gt_batch, weights)
    return objective + psf, float(objective.data), float(psf.data)


def train(cfg: TrainConfig, data_dir, out_dir, resume=None, config_text: str | None = None) -> TrainResult:
    """Optimize the denoiser on the manifest's training split.

    Writes a per-step loss log (JSONL) and a final checkpoint under
    `out_dir`; `resume` continues from a saved checkpoint and reproduces
    the exact loss sequence the uninterrupted run would have produced.
    """
    cfg.validate()
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    manifest = DatasetManifest.load(data_dir / MANIFEST_NAME)
    samples = load_split(data_dir, manifest, cfg.scale, "train")
    if not samples:
        raise DatasetError("training split is empty")

    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    weights = LossWeights(cfg.lambda1, cfg.lambda2, cfg.psf_enabled)

    rng = np.random.default_rng(cfg.seed)
    net = build_net(cfg, rng)
    adam = Adam(net.parameters(), cfg.lr)
    start_step = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if config_from_checkpoint(ck) != cfg:
            raise CheckpointError("resume checkpoint was trained with a different configuration")
        _apply_params(net, ck.params)
        named = [n for n, _ in net.named_parameters()]
        adam.m = [ck.adam_m[n].copy() for n in named]
        adam.v = [ck.adam_v[n].copy() for n in named]
        adam.steps = ck.adam_steps
        rng.bit_generator.state = ck.rng_state
        start_step = ck.step
        if start_step > cfg.total_steps:
            raise CheckpointError(
                f"checkpoint is at step {start_step}, beyond total_steps {cfg.total_steps}"
            )

    conds = [s.conditioning_stack() for s in samples]
    gts = [s.gt_normalized() for s in samples]

    config_payload = {
        "profile": cfg.profile,
        "fields": cfg.to_fields(),
        "config_text": config_text if config_text is not None else render_config(cfg),
    }

    def snapshot(step):
        return Checkpoint(
            config=config_payload,
            step=step,
            rng_state=rng.bit_generator.state,
            params={n: p.data for n, p in net.named_parameters()},
            adam_m={n: m for (n, _), m in zip(net.named_parameters(), adam.m)},
            adam_v={n: v for (n, _), v in zip(net.named_parameters(), adam.v)},
            adam_steps=adam.steps,
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOSS_LOG_NAME
    ckpt_path = out_dir / CHECKPOINT_NAME
    recent: list[float] = []
    started = time.perf_counter()
    with open(log_path, "w") as log:
        for step in range(start_step + 1, cfg.total_steps + 1):
            batch = rng.integers(0, len(samples), size=cfg.batch_size)
            loss, diffusion_part, psf_part = _batch_loss(net, conds, gts, sched, weights, rng, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at step {step}: total={value}, diffusion={diffusion_part}, "
                    f"psf={psf_part}, batch={batch.tolist()}"
                )
            adam.zero_grad()
            loss.backward()
            adam.step()
            log.write(json.dumps({"step": step, "loss": value, "diffusion": diffusion_part,
                                  "psf": psf_part}) + "\n")
            recent.append(value)
            if len(recent) > LOSS_WINDOW:
                recent.pop(0)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.total_steps:
                save_checkpoint(snapshot(step), out_dir / f"checkpoint_{step:07d}.ckpt")
            if step % 200 == 0 or step == cfg.total_steps:
                logger.info("step %d/%d loss %.5f (%.1fs)", step, cfg.total_steps,
                            float(np.mean(recent)), time.perf_counter() - started)

    save_checkpoint(snapshot(cfg.total_steps), ckpt_path)
    final = float(np.mean(recent)) if recent else float("nan")
    return TrainResult(
        checkpoint_path=str(ckpt_path),
        loss_log_path=str(log_path),
        steps=cfg.total_steps,
        final_loss=final,
        parameter_count=count_parameters(net),
    )


# -- fusion ---------------------------------------------------------------------


@dataclass
class FuseResult:
    out_path: str
    steps: int
    seconds: float


def _required_input_multiple(scale: int) -> int:
    return max(1, 8 // scale)


def load_fusion_net(checkpoint_path) -> tuple[FusionNet, TrainConfig]:
    ck = load_checkpoint(checkpoint_path)
    cfg = config_from_checkpoint(ck)
    net = build_net(cfg, np.random.default_rng(0))
    _apply_params(net, ck.params)
    return net, cfg


def fuse_images(checkpoint_path, x_path, y_path, s_path, out_path, seed: int = 0) -> FuseResult:
    """Fuse three modality files with a trained checkpoint; writes 8-bit PNG.

    Byte-identical output for identical inputs and seed. Per-step timings go
    to the module logger at debug level.
    """
    net, cfg = load_fusion_net(checkpoint_path)
    mods = []
    for name, path in (("x", x_path), ("y", y_path), ("s", s_path)):
        img = load_image(path)
        if img.shape[0] != 1:
            raise DatasetError(f"modality {name} must be single-channel, got {img.shape[0]} channels")
        mods.append(img)
    if not (mods[0].shape == mods[1].shape == mods[2].shape):
        raise DatasetError(f"modality shapes differ: {[m.shape for m in mods]}")
    h, w = mods[0].shape[1:]
    multiple = _required_input_multiple(cfg.scale)
    if h % multiple or w % multiple:
        raise DatasetError(
            f"input {h}x{w} incompatible with scale x{cfg.scale}: the network needs output sizes "
            f"divisible by 8, so input sides must be multiples of {multiple}"
        )

    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    timings: list[float] = []

    def on_step(t, dt):
        timings.append(dt)
        logger.debug("reverse step %d: %.4fs", t, dt)

    fused = sample_fusion(*mods, net, sched, np.random.default_rng(seed), scale=cfg.scale,
                          on_step=on_step)
    save_image(fused, out_path)
    logger.info("fused %s (%d steps, %.2fs total, %.4fs/step)",
                out_path, len(timings), sum(timings), float(np.mean(timings)))
    return FuseResult(out_path=str(out_path), steps=len(timings), seconds=float(sum(timings)))


# -- ablation ---------------------------------------------------------------------


ABLATION_COLUMNS = ("vif", "ssim", "psnr", "ag", "mse", "lpips", "mae", "rmse")


@dataclass
class AblateResult:
    summary_path: str
    table_path: str
    variants: dict  # name -> {"mean": {...}, "report_path": ..., "checkpoint_path": ...}


def ablation_variants(cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Baseline plus the two single-field ablations, identical otherwise."""
    return [
        ("baseline", cfg),
        ("no_tmfa", dataclasses.replace(cfg, tmfa_enabled=False)),
        ("no_psf", dataclasses.replace(cfg, psf_enabled=False)),
    ]


def _fuse_split(checkpoint_path, data_dir, manifest, cfg, split, dest, base_seed):
    dest = Path(dest)
    ids = manifest.split_ids(split)
    if not ids:
        raise DatasetError(f"split {split!r} is empty")
    for i, sample_id in enumerate(ids):
        sample_dir = Path(data_dir) / f"x{cfg.scale}" / sample_id
        fuse_images(
            checkpoint_path,
            sample_dir / "x.png",
            sample_dir / "y.png",
            sample_dir / "s.png",
            dest / f"{sample_id}.png",
            seed=base_seed + i,
        )
    return dest


def _collect_gt(data_dir, manifest, cfg, split, dest):
    dest = Path(dest)
    for sample_id in manifest.split_ids(split):
        gt = load_image(Path(data_dir) / f"x{cfg.scale}" / sample_id / GT_FILE)
        save_image(gt, dest / f"{sample_id}.png")
    return dest


def ablation_table(means: dict) -> str:
    headers = ["variant"] + [c.upper() for c in ABLATION_COLUMNS]
    rows = []
    for name, mean in means.items():
        row = [name]
        for c in ABLATION_COLUMNS:
            v = mean.get(c)
            row.append("" if v is None else ("inf" if np.isinf(v) else f"{v:.4f}"))
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows)
    return "\n".join(lines)


def ablate(cfg: TrainConfig, data_dir, out_dir, split: str = "test") -> AblateResult:
    """Train and evaluate the baseline and both ablations with shared seed/data.

    Produces one summary JSON plus a comparison table; per-variant artifacts
    (checkpoint, loss log, fused images, metric report) live in
    `out_dir/<variant>/`.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    data_dir = Path(data_dir)
    manifest = DatasetManifest.load(data_dir / MANIFEST_NAME)
    gt_dir = _collect_gt(data_dir, manifest, cfg, split, out_dir / "gt")

    variants = {}
    means = {}
    for name, vcfg in ablation_variants(cfg):
        vdir = out_dir / name
        result = train(vcfg, data_dir, vdir)
        fused_dir = _fuse_split(result.checkpoint_path, data_dir, manifest, vcfg, split,
                                vdir / "fused", base_seed=cfg.seed)
        report: MetricsReport = evaluate_set(fused_dir, gt_dir)
        report_path = vdir / "report.json"
        report.save(report_path)
        (vdir / "report.txt").write_text(report.render_table() + "\n")
        variants[name] = {
            "config": vcfg.to_fields(),
            "checkpoint_path": result.checkpoint_path,
            "report_path": str(report_path),
            "mean": report.mean,
        }
        means[name] = report.mean
        logger.info("ablation variant %s: ssim %.4f", name, report.mean["ssim"])

    table = ablation_table(means)
    summary = {
        "schema_version": 1,
        "split": split,
        "seed": cfg.seed,
        "variants": {
            name: {k: v for k, v in info.items() if k != "mean"} | {"mean": _mean_jsonable(info["mean"])}
            for name, info in variants.items()
        },
    }
    summary_path = out_dir / "ablation_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    table_path = out_dir / "ablation_table.txt"
    table_path.write_text(table + "\n")
    return AblateResult(summary_path=str(summary_path), table_path=str(table_path), variants=variants)


def _mean_jsonable(mean: dict) -> dict:
    return {k: ("inf" if isinstance(v, float) and np.isinf(v) else v) for k, v in mean.items()}
