"""Request and response bodies for the HTTP service.

All file references are paths relative to the service workspace; the app
rejects anything that resolves outside it.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class GenerateRequest(BaseModel):
    system: Literal["sobol", "bridge"] = "sobol"
    size: float = 16
    seed: int = 0
    window: float = Field(4.0, gt=0, description="simulated duration, s")
    dt: float = Field(0.01, gt=0, description="recording grid spacing, s")
    sparsity: float = Field(75.0, ge=0, lt=100)
    snr: Optional[float] = Field(25.0, gt=0, description="null for noiseless")
    amplitude: float = Field(1.5, gt=0)
    band: tuple[float, float] = (0.5, 4.0)
    forced_count: int = Field(4, ge=1)
    forcing_seed: Optional[int] = None
    noise_seed: Optional[int] = None
    out_prefix: str = "data/run"


class GenerateResponse(BaseModel):
    system_path: str
    dataset_path: str
    n_nodes: int
    n_edges: int
    n_steps: int
    measured_nodes: list[int]


class TrainRequest(BaseModel):
    system_path: str
    dataset_path: str
    out_model: str = "model.npz"
    out_history: Optional[str] = None
    use_true_parameters: bool = False
    loss: Literal["deterministic", "nll"] = "deterministic"
    learning_rate: float = Field(1e-3, gt=0)
    max_epochs: int = Field(5000, ge=1)
    tolerance: float = Field(1e-6, gt=0)
    patience: int = Field(25, ge=1)
    node_latent: int = Field(16, ge=1)
    edge_latent: int = Field(16, ge=1)
    hidden: tuple[int, ...] = (64, 64)
    message_outputs: Literal[1, 2] = 1
    substeps: int = Field(1, ge=1)
    seed: int = 0
    amplitude: float = Field(1.5, gt=0, description="forcing RMS for feature scales")


class JobCreated(BaseModel):
    job_id: str
    status: str


class JobStatus(BaseModel):
    job_id: str
    status: Literal["queued", "running", "done", "error"]
    detail: Optional[str] = None
    error_kind: Optional[Literal["validation", "divergence", "other"]] = None
    progress: Optional[dict] = None
    result: Optional[dict] = None


class RolloutRequest(BaseModel):
    model_path: str
    system_path: str
    dataset_path: str
    out_path: str = "open_loop.txt"
    use_true_parameters: bool = False
    substeps: int = Field(1, ge=1)


class RolloutResponse(BaseModel):
    out_path: str
    nmse_u: float
    nmse_v: float
    nmse_a: float


class FilterRequest(BaseModel):
    model_path: str
    system_path: str
    dataset_path: str
    out_path: str = "filtered.txt"
    use_true_parameters: bool = False
    substeps: int = Field(1, ge=1)
    epsilon_model: Optional[float] = Field(
        None, gt=0, description="process-noise acceleration scale; null derives it"
    )
    initial_variance: float = Field(
        1e-6, ge=0, description="tight default since trajectories start at rest"
    )
    measurement_override: Optional[float] = Field(None, ge=0)


class FilterResponse(BaseModel):
    out_path: str
    nmse_u: float
    nmse_v: float
    nmse_a: float
    epsilon_model: float


class EvaluateRequest(BaseModel):
    prediction_path: str
    dataset_path: str
    kind: Literal["rollout", "filter"] = "rollout"
    model_id: Optional[str] = None
    case: str = "custom"
    squared_denominator: bool = False
    out_path: Optional[str] = None


class EvaluateResponse(BaseModel):
    model_id: str
    case: str
    nmse_u: float
    nmse_v: float
    nmse_a: float
    per_node_path: Optional[str] = None


class ExperimentRequest(BaseModel):
    preset: Optional[str] = None
    config: Optional[dict] = None
    seed: Optional[int] = None
    max_epochs: Optional[int] = Field(None, ge=1)
    out_dir: str = "runs/experiment"
    plots: bool = False


class ReportRequest(BaseModel):
    run_dirs: list[str]
    out_path: str = "report.txt"


class ReportResponse(BaseModel):
    out_path: str
    table: str


class HealthResponse(BaseModel):
    status: str
    version: str
