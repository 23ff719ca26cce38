from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Literal, Optional, Dict, List, Any


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Metric names used across configs, CSV rows and figure ids
METRIC_NAMES = (
    "energy_ebm",          # (alpha * E_theta + beta) I
    "inv_density_ebm",     # (alpha * exp(-E_theta) + beta)^-1 I
    "energy_oracle",       # (-alpha * log p_M + beta) I
    "inv_density_oracle",  # (alpha * p_M + beta)^-1 I
    "land",
    "rbf",
)
MetricName = Literal[
    "energy_ebm", "inv_density_ebm", "energy_oracle", "inv_density_oracle", "land", "rbf", "euclidean"
]


class DatasetSpec(Section):
    variant: Literal["ucg", "wcg", "custom"] = "ucg"
    K: int = Field(200, ge=1)
    R: float = Field(8.0, gt=0)
    n_samples: int = Field(5000, ge=1)
    seed: int = 0
    wcg_ratio: float = Field(6.0, gt=1)
    centers: Optional[List[List[float]]] = None
    weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_custom(self):
        if self.variant == "custom":
            if not self.centers:
                raise ValueError("custom variant needs explicit centers")
            if self.weights is not None and len(self.weights) != len(self.centers):
                raise ValueError("weights and centers differ in length")
        return self


class LangevinConfig(Section):
    steps: int = Field(100, ge=1)
    step_size: float = Field(1.0, gt=0)
    noise: float = Field(1e-2, ge=0)
    buffer_prob: float = Field(0.95, ge=0, le=1)
    capacity: int = Field(10000, ge=1)
    drift_clip: Optional[float] = Field(0.1, gt=0)


class EbmTrainConfig(Section):
    batch_size: int = Field(128, ge=1)
    lr: float = Field(1e-4, gt=0)
    steps: int = Field(20000, ge=0)
    reg_weight: float = Field(1.0, ge=0)
    divergence_bound: float = Field(1e4, gt=0)
    box_inflation: float = Field(0.2, ge=0)
    log_every: int = Field(100, ge=1)
    seed: int = 0


class MetricSuiteConfig(Section):
    selection: List[MetricName] = Field(default_factory=lambda: list(METRIC_NAMES))
    land_sigma: float = Field(1.0, gt=0)
    land_sigma_sweep: List[float] = Field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0, 5.0])
    rbf_k: int = Field(30, ge=1)
    rbf_kappa: float = Field(1.0, gt=0)
    rbf_bandwidth: Literal["centroids", "members"] = "centroids"
    rbf_k_sweep: List[int] = Field(default_factory=lambda: [10, 50, 100])
    g_min: float = Field(1.0, gt=0)
    g_max: float = Field(1000.0, gt=0)
    calibration_pairs: int = Field(500, ge=1)
    calibration_seed: int = 0

    @model_validator(mode="after")
    def check_targets(self):
        if self.g_max <= self.g_min:
            raise ValueError("g_max must exceed g_min")
        return self


class InterpolantTrainConfig(Section):
    T: int = Field(100, ge=2)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, gt=0)
    steps: int = Field(10000, ge=0)
    log_every: int = Field(100, ge=1)
    seed: int = 0


class WaypointConfig(Section):
    T: int = Field(100, ge=2)
    steps: int = Field(500, ge=0)
    initial_step: float = Field(1.0, gt=0)
    tol: float = Field(1e-10, ge=0)


class ShootingConfig(Section):
    T: int = Field(100, ge=2)
    substeps: int = Field(4, ge=1)
    restarts: int = Field(20, ge=1)
    tol: float = Field(1e-3, gt=0)
    restart_scale: float = Field(0.5, ge=0)
    seed: int = 0


class EvalSpec(Section):
    n_sets: int = Field(5, ge=2)
    pairs_per_set: int = Field(200, ge=1)
    solver: Literal["interpolant", "waypoint"] = "interpolant"
    seed: int = 0


class PlotConfig(Section):
    grid: int = Field(200, ge=10)
    box: float = Field(14.0, gt=0)
    levels: int = Field(20, ge=2)
    paths: int = Field(8, ge=1)


class RunConfig(Section):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    ebm: EbmTrainConfig = Field(default_factory=EbmTrainConfig)
    langevin: LangevinConfig = Field(default_factory=LangevinConfig)
    metrics: MetricSuiteConfig = Field(default_factory=MetricSuiteConfig)
    interpolant: InterpolantTrainConfig = Field(default_factory=InterpolantTrainConfig)
    waypoint: WaypointConfig = Field(default_factory=WaypointConfig)
    shooting: ShootingConfig = Field(default_factory=ShootingConfig)
    eval: EvalSpec = Field(default_factory=EvalSpec)
    plot: PlotConfig = Field(default_factory=PlotConfig)
    seed: int = 0
    output_dir: str = "runs/default"


# Persisted records

class ArraySpec(BaseModel):
    name: str
    shape: List[int]


class CheckpointHeader(BaseModel):
    kind: Literal["energy", "interpolant"]
    descriptor: Dict[str, Any]
    arrays: List[ArraySpec]
    seed: Optional[int] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)


class MetricDescriptor(BaseModel):
    name: str
    kind: Literal["conformal", "diagonal"]
    form: Literal["direct", "inverse"]
    alpha: float
    beta: float
    eps: float
    hyper: Dict[str, Any] = Field(default_factory=dict)
    provenance: Dict[str, str] = Field(default_factory=dict)


class EvalRow(BaseModel):
    dataset: str
    metric: str
    solver: str
    n_pairs: int
    acc_prob_mean: float
    acc_prob_2sig: float
    rmse_mean: float
    rmse_2sig: float
    skipped: int
    acc_prob_raw_mean: float
    acc_prob_raw_2sig: float
    nn_rmse_mean: float
    clamped: int


class EvalReport(BaseModel):
    dataset: str
    n_sets: int
    pairs_per_set: int
    rows: List[EvalRow]
