"""FastAPI service wrapping the fusion pipeline.

Every operation of the pipeline is an endpoint; the CLI is a thin client
of this API. Endpoints run synchronously: at desk scale a training job
takes minutes, and determinism is easier to reason about without a queue.
Domain errors map to HTTP 400 with a stable machine-readable code.
"""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import ConfigError, resolve_config
from ..data import DatasetError, build_dataset, make_synthetic_source
from ..metrics import MetricsError, evaluate_set
from ..tensor import ShapeError
from ..training import CheckpointError, TrainingError, ablate, fuse_images, train
from . import schemas

logger = logging.getLogger(__name__)

ERROR_CODES = {
    ConfigError: "CONFIG",
    DatasetError: "DATASET",
    MetricsError: "METRICS",
    CheckpointError: "CHECKPOINT",
    TrainingError: "TRAINING",
    ShapeError: "SHAPE",
}


def error_code(exc: Exception) -> str:
    for cls, code in ERROR_CODES.items():
        if isinstance(exc, cls):
            return code
    return "INTERNAL"


def create_app() -> FastAPI:
    app = FastAPI(title="trifuse", version=__version__)

    @app.exception_handler(ValueError)
    @app.exception_handler(TrainingError)
    async def domain_error(request: Request, exc: Exception):
        code = error_code(exc)
        status = 500 if code == "INTERNAL" else 400
        logger.warning("%s error on %s: %s", code, request.url.path, exc)
        return JSONResponse(status_code=status, content={"error": code, "detail": str(exc)})

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/dataset/synthetic", response_model=schemas.SyntheticResponse)
    def synthetic(req: schemas.SyntheticRequest):
        ids = make_synthetic_source(req.out_dir, req.count, req.size, req.seed, req.modality_config)
        return schemas.SyntheticResponse(out_dir=req.out_dir, sample_ids=ids)

    @app.post("/v1/dataset/build", response_model=schemas.BuildDatasetResponse)
    def dataset_build(req: schemas.BuildDatasetRequest):
        manifest = build_dataset(req.src_dir, req.out_dir, scales=req.scales,
                                 ratio=req.ratio, seed=req.seed)
        return schemas.BuildDatasetResponse(
            manifest_path=str(Path(req.out_dir) / "manifest.json"),
            split_sizes={name: len(ids) for name, ids in manifest.split.items()},
            scales=list(manifest.scales),
            rejected=manifest.rejected,
        )

    @app.post("/v1/train", response_model=schemas.TrainResponse)
    def train_run(req: schemas.TrainRequest):
        cfg = resolve_config(req.profile, req.config_text, req.overrides)
        result = train(cfg, req.data_dir, req.out_dir, resume=req.resume,
                       config_text=req.config_text)
        return schemas.TrainResponse(
            checkpoint_path=result.checkpoint_path,
            loss_log_path=result.loss_log_path,
            steps=result.steps,
            final_loss=result.final_loss,
            parameter_count=result.parameter_count,
        )

    @app.post("/v1/fuse", response_model=schemas.FuseResponse)
    def fuse_run(req: schemas.FuseRequest):
        result = fuse_images(req.checkpoint, req.x, req.y, req.s, req.out, seed=req.seed)
        return schemas.FuseResponse(out_path=result.out_path, steps=result.steps,
                                    seconds=result.seconds)

    @app.post("/v1/eval", response_model=schemas.EvalResponse)
    def eval_run(req: schemas.EvalRequest):
        report = evaluate_set(req.results_dir, req.gt_dir, value_range=req.value_range,
                              lpips_cmd=req.lpips_cmd, allow_partial=req.allow_partial)
        report_path = None
        if req.report_out:
            report.save(req.report_out)
            table_path = Path(req.report_out).with_suffix(".txt")
            table_path.write_text(report.render_table() + "\n")
            report_path = req.report_out
        return schemas.EvalResponse(report=report.to_dict(), table=report.render_table(),
                                    report_path=report_path)

    @app.post("/v1/ablate", response_model=schemas.AblateResponse)
    def ablate_run(req: schemas.AblateRequest):
        cfg = resolve_config(req.profile, req.config_text, req.overrides)
        result = ablate(cfg, req.data_dir, req.out_dir, split=req.split)
        return schemas.AblateResponse(
            summary_path=result.summary_path,
            table_path=result.table_path,
            table=Path(result.table_path).read_text(),
            mean_ssim={name: info["mean"]["ssim"] for name, info in result.variants.items()},
        )

    return app
