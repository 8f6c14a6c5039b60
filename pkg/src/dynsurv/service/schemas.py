"""Pydantic request/response models for the HTTP service."""

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field

FormName = Literal["value", "value_slope", "area", "weighted_area", "shared_re"]
MethodName = Literal["joint", "landmark"]
BaselineName = Literal["weibull", "bspline", "breslow"]
LossName = Literal["absolute", "square"]


class LongitudinalRow(BaseModel):
    subject_id: str
    time: float
    value: float


class SurvivalRow(BaseModel):
    subject_id: str
    event_time: float
    status: int
    covariates: dict[str, float] = Field(default_factory=dict)


class DatasetPayload(BaseModel):
    longitudinal: list[LongitudinalRow]
    survival: list[SurvivalRow]
    covariate_names: list[str]


class SimulateRequest(BaseModel):
    scenario: str
    n: int = 300
    seed: int


class SimulateResponse(BaseModel):
    dataset: DatasetPayload
    truth: dict[str, Any]
    config: dict[str, Any]


class FitOptions(BaseModel):
    boundary_knots: tuple[float, float] = (0.0, 19.0)
    internal_knots: list[float] = [2.1, 5.5]
    group_covariate: Optional[str] = None
    gamma_covariates: Optional[list[str]] = None
    diagonal_d: bool = False
    gh_nodes: Optional[int] = None
    baseline_internal_knots: int = 5


class FitRequest(BaseModel):
    method: MethodName
    form: FormName
    baseline: BaselineName = "weibull"
    landmark_time: Optional[float] = None
    dataset: DatasetPayload
    options: FitOptions = Field(default_factory=FitOptions)
    warm_start: Optional[dict[str, Any]] = None


class FitResponse(BaseModel):
    fit: dict[str, Any]
    loglik: float
    converged: bool
    config: dict[str, Any]


class SubjectPayload(BaseModel):
    covariates: dict[str, float] = Field(default_factory=dict)
    times: list[float]
    values: list[float]


class PredictRequest(BaseModel):
    fit: dict[str, Any]
    subject: SubjectPayload
    landmark: float
    horizons: list[float]
    n_draws: int = 200
    seed: int


class PredictionRow(BaseModel):
    u: float
    pi_hat: float
    lo: float
    hi: float


class PredictResponse(BaseModel):
    rows: list[PredictionRow]
    config: dict[str, Any]


class EvaluateRequest(BaseModel):
    dataset: DatasetPayload
    fits: list[dict[str, Any]]
    model_names: Optional[list[str]] = None
    t: float
    u: float
    dt: float
    t_max: float
    loss: LossName = "absolute"
    n_draws: int = 200
    seed: int = 0


class MetricRow(BaseModel):
    model: str
    metric: str
    t: float
    window: float
    value: Optional[float]
    reason: Optional[str] = None


class EvaluateResponse(BaseModel):
    rows: list[MetricRow]
    config: dict[str, Any]


class BenchmarkRequest(BaseModel):
    scenarios: list[str]
    replicates: int
    n_draws: int = 200
    seed: int
    n_subjects: int = 300
    models: Optional[list[str]] = None
    workers: int = 1


class BenchmarkRow(BaseModel):
    scenario: str
    model: str
    replicate: int
    subject: str
    rmse: float


class BenchmarkSummaryRow(BaseModel):
    scenario: str
    model: str
    n: int
    median_rmse: float
    q1_rmse: float
    q3_rmse: float


class BenchmarkResponse(BaseModel):
    rows: list[BenchmarkRow]
    summary: list[BenchmarkSummaryRow]
    config: dict[str, Any]


class CalibrateRequest(BaseModel):
    scenario: str
    target: float = 0.45
    n_pilot: int = 10000
    seed: int


class CalibrateResponse(BaseModel):
    scenario: str
    t_c: float
    config: dict[str, Any]
