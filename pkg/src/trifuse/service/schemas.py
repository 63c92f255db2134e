"""Request and response models for the HTTP service.

Paths refer to the server's filesystem; the service is a local-first
wrapper around the core package, so the CLI and the endpoints share one
vocabulary: these models mirror the core function signatures and the
TrainConfig field names.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class SyntheticRequest(BaseModel):
    out_dir: str
    count: int = Field(default=4, ge=1)
    size: int = Field(default=32, ge=8)
    seed: int = 0
    modality_config: str = "MR-T1/MR-T2/SPECT"


class SyntheticResponse(BaseModel):
    out_dir: str
    sample_ids: list[str]


class BuildDatasetRequest(BaseModel):
    src_dir: str
    out_dir: str
    scales: list[int] = [2, 4, 8]
    ratio: tuple[int, int, int] = (84, 10, 25)
    seed: int = 0


class BuildDatasetResponse(BaseModel):
    manifest_path: str
    split_sizes: dict[str, int]
    scales: list[int]
    rejected: list[dict]


class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    profile: str = "toy"
    config_text: str | None = None
    overrides: dict[str, str] = {}
    resume: str | None = None


class TrainResponse(BaseModel):
    checkpoint_path: str
    loss_log_path: str
    steps: int
    final_loss: float
    parameter_count: int


class FuseRequest(BaseModel):
    checkpoint: str
    x: str
    y: str
    s: str
    out: str
    seed: int = 0


class FuseResponse(BaseModel):
    out_path: str
    steps: int
    seconds: float


class EvalRequest(BaseModel):
    results_dir: str
    gt_dir: str
    value_range: float = 255.0
    report_out: str | None = None
    lpips_cmd: str | None = None
    allow_partial: bool = False


class EvalResponse(BaseModel):
    report: dict
    table: str
    report_path: str | None


class AblateRequest(BaseModel):
    data_dir: str
    out_dir: str
    profile: str = "toy"
    config_text: str | None = None
    overrides: dict[str, str] = {}
    split: str = "test"


class AblateResponse(BaseModel):
    summary_path: str
    table_path: str
    table: str
    mean_ssim: dict[str, float]


class ErrorResponse(BaseModel):
    error: str
    detail: str
