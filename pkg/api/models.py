# models.py - value types shared by the api modules
#
# Config-like values are pydantic models (validated when read from TOML or JSON);
# raster-carrying values are dataclasses around numpy arrays.

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from api.errors import ShapeError
from presets.preset_configs import DEFAULTS

Vector2 = Tuple[float, float]
Domain = Literal["image", "kspace"]

# Tensor4 is a plain (batch, channels, height, width) numpy array throughout the network code.
Tensor4 = np.ndarray


class GridSpec(BaseModel):
    """Raster size plus physical field of view"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    rows: int = Field(128, ge=8)
    cols: int = Field(128, ge=8)
    fov_x_cm: float = Field(22.0, gt=0)
    fov_y_cm: float = Field(22.0, gt=0)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    def resized(self, rows: int, cols: int) -> "GridSpec":
        return GridSpec(rows=rows, cols=cols, fov_x_cm=self.fov_x_cm, fov_y_cm=self.fov_y_cm)


def _check_range(name: str, value: Tuple[float, float]) -> Tuple[float, float]:
    low, high = value
    if low > high:
        raise ValueError(f"{name} must satisfy low <= high, got {value}")
    return value


class RandomTemplateSpec(BaseModel):
    """Recipe for one random T2 / proton-density training template"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    n_shapes: Tuple[int, int] = (5, 30)
    t2_range_ms: Vector2 = (30.0, 300.0)
    csf_t2_range_ms: Vector2 = (500.0, 2000.0)
    csf_fraction: float = Field(0.15, ge=0.0, le=1.0)
    pd_range: Vector2 = (0.3, 1.0)
    smooth_sigma_px: float = Field(0.7, ge=0.0)

    @model_validator(mode="after")
    def _validate_ranges(self) -> "RandomTemplateSpec":
        _check_range("n_shapes", self.n_shapes)
        _check_range("t2_range_ms", self.t2_range_ms)
        _check_range("csf_t2_range_ms", self.csf_t2_range_ms)
        _check_range("pd_range", self.pd_range)
        if self.n_shapes[0] < 1:
            raise ValueError("n_shapes must start at 1 or more")
        if self.t2_range_ms[0] <= 0 or self.csf_t2_range_ms[0] <= 0:
            raise ValueError("T2 ranges must be positive")
        if self.pd_range[0] < 0 or self.pd_range[1] > 1:
            raise ValueError("pd_range must lie inside [0, 1]")
        return self


class SequenceParams(BaseModel):
    """Everything that defines one OLED acquisition"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha_deg: float = Field(45.0, gt=0.0, lt=180.0)
    beta_deg: float = Field(180.0, gt=0.0, le=180.0)
    te1_ms: float = Field(22.0, gt=0.0)
    te2_ms: float = Field(68.0, gt=0.0)
    shift1_cyc: Vector2
    shift2_cyc: Vector2
    shift3_cyc: Vector2
    snr_db: Optional[float] = None

    @model_validator(mode="after")
    def _validate_sequence(self) -> "SequenceParams":
        if self.te2_ms <= self.te1_ms:
            raise ValueError("te2_ms must be greater than te1_ms")
        shifts = [tuple(self.shift1_cyc), tuple(self.shift2_cyc), tuple(self.shift3_cyc)]
        if len(set(shifts)) != 3:
            raise ValueError(f"echo shifts must be pairwise distinct, got {shifts}")
        return self

    @property
    def delta_te_ms(self) -> float:
        return self.te2_ms - self.te1_ms

    @property
    def shifts(self) -> Tuple[Vector2, Vector2, Vector2]:
        return (self.shift1_cyc, self.shift2_cyc, self.shift3_cyc)

    @classmethod
    def for_grid(cls, grid: GridSpec, **overrides: Any) -> "SequenceParams":
        """Sequence with the default echo layout of an acquisition grid"""
        layout = {
            "shift1_cyc": (-grid.cols / 4, -grid.rows / 4),
            "shift2_cyc": (grid.cols / 4, grid.rows / 4),
            "shift3_cyc": (0.0, grid.rows / 2),
        }
        layout.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**layout)


@dataclass(frozen=True)
class EchoAmplitudes:
    a1: float
    a2: float
    a3: float

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.a1, self.a2, self.a3)


@dataclass
class TissueMap:
    """T2 (ms) and proton density over a grid; the simulation ground truth"""
    grid: GridSpec
    t2_ms: np.ndarray
    pd: np.ndarray

    def __post_init__(self):
        if self.t2_ms.shape != self.grid.shape or self.pd.shape != self.grid.shape:
            raise ShapeError(
                f"tissue rasters {self.t2_ms.shape}/{self.pd.shape} do not match grid {self.grid.shape}"
            )

    @property
    def support(self) -> np.ndarray:
        return self.pd > 0


@dataclass
class ComplexImage:
    grid: GridSpec
    data: np.ndarray
    domain: Domain = "image"
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.data.shape != self.grid.shape:
            raise ShapeError(f"raster {self.data.shape} does not match grid {self.grid.shape}")
        if self.domain not in ("image", "kspace"):
            raise ValueError(f"unknown domain tag: {self.domain}")

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    def with_data(self, data: np.ndarray, domain: Optional[Domain] = None, **metadata: Any) -> "ComplexImage":
        merged = dict(self.metadata)
        merged.update(metadata)
        return replace(self, data=data, domain=domain or self.domain, metadata=merged)


class GaussianEchoFilter(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    center_cyc: Vector2
    sigma_cyc: float = Field(gt=0.0)
    mode: Literal["pass", "reject"] = "reject"


class DetachParams(BaseModel):
    """Weights and stopping rules of the echo-detachment solver.

    lambda1..3 and edge_sigma are fractions of the peak magnitude of x0, so the
    solver behaves the same for any image intensity scale.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda1: float = Field(5e-3, ge=0.0)
    lambda2: float = Field(5e-3, ge=0.0)
    lambda3: float = Field(1e-2, ge=0.0)
    kappa_mode: Literal["fixed", "median_ratio"] = "median_ratio"
    kappa: float = Field(1.0, gt=0.0)
    edge_sigma: float = Field(0.05, gt=0.0)
    max_outer_iters: int = Field(400, ge=1)
    pd_threshold: float = Field(0.05, ge=0.0, le=1.0)
    tol: float = Field(1e-5, gt=0.0)
    echo_sigma_cyc: Optional[float] = Field(None, gt=0.0)


@dataclass
class DetachResult:
    x1: ComplexImage
    x2: ComplexImage
    objective_trace: List[float]
    t2_ms: np.ndarray
    mask: np.ndarray
    converged: bool
    kappa: float
    iterations: int


class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_param_layers: int = Field(8, ge=4)
    filters: int = Field(64, ge=1)
    kernel: int = Field(3, ge=1)
    in_channels: Literal[2] = 2
    out_channels: Literal[1] = 1

    @field_validator("n_param_layers")
    @classmethod
    def _even_depth(cls, value: int) -> int:
        if value % 2:
            raise ValueError("n_param_layers must be even so (L - 2) / 2 residual units fit")
        return value

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel must be odd")
        return value

    @property
    def residual_units(self) -> int:
        return (self.n_param_layers - 2) // 2


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr_schedule: List[Tuple[int, float]] = [(0, 0.1), (32000, 0.01), (64000, 0.001)]
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-8, ge=0.0)
    batch: int = Field(16, ge=1)
    max_iters: int = Field(100000, ge=1)
    patch: int = Field(64, ge=1)
    seed: int = 0
    t2_scale_ms: float = Field(500.0, gt=0.0)
    noise_snr_db: Optional[float] = 115.3
    jitter_frac: float = Field(0.1, ge=0.0, lt=1.0)
    val_every: int = Field(500, ge=1)
    log_every: int = Field(100, ge=1)
    progress: bool = False

    @field_validator("lr_schedule")
    @classmethod
    def _increasing_schedule(cls, value: List[Tuple[int, float]]) -> List[Tuple[int, float]]:
        if not value:
            raise ValueError("lr_schedule needs at least one entry")
        iterations = [step for step, _ in value]
        if any(b <= a for a, b in zip(iterations, iterations[1:])):
            raise ValueError("lr_schedule iterations must be strictly increasing")
        if iterations[0] != 0:
            raise ValueError("lr_schedule must start at iteration 0")
        return value


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False


@dataclass
class NetworkCheckpoint:
    config: NetworkConfig
    conv: List[ConvLayer]
    bn: List[BatchNormLayer]
    iteration: int = 0
    rng_digest: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)
    # SGD momentum buffers; in-memory only, never written to disk
    velocity: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def parameters(self) -> Dict[str, np.ndarray]:
        """Learnable arrays keyed by a stable name (used by SGD and gradient checks)"""
        params: Dict[str, np.ndarray] = {}
        for i, (conv, bn) in enumerate(zip(self.conv, self.bn), start=1):
            params[f"layer{i}.weight"] = conv.weight
            params[f"layer{i}.bias"] = conv.bias
            params[f"layer{i}.gamma"] = bn.gamma
            params[f"layer{i}.beta"] = bn.beta
        return params


@dataclass
class TrainingPair:
    """One double-echo-removed OLED image and its ground-truth T2 raster (ms)"""
    oled: ComplexImage
    t2_ms: np.ndarray

    def __post_init__(self):
        if self.t2_ms.shape != self.oled.grid.shape:
            raise ShapeError(f"T2 raster {self.t2_ms.shape} does not match image grid {self.oled.grid.shape}")


class RoiSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: int
    center_px: Vector2  # (x = column, y = row)
    radius_px: float = Field(ge=1.0)


class SampleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    index: int
    oled_path: str
    t2_path: str
    seed: int
    sequence: SequenceParams
    jitter: List[float] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = 1
    root_seed: int = 0
    samples: List[SampleRecord] = Field(default_factory=list)
    split: Dict[str, List[int]] = Field(default_factory=lambda: {"train": [], "test": []})

    @model_validator(mode="after")
    def _disjoint_split(self) -> "DatasetManifest":
        train = set(self.split.get("train", []))
        test = set(self.split.get("test", []))
        if train & test:
            raise ValueError(f"train/test splits overlap on samples {sorted(train & test)}")
        return self


class DatasetConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    count: int = Field(100, ge=1)
    n_train: int = Field(90, ge=0)
    jitter_frac: float = Field(0.1, ge=0.0, lt=1.0)
    snr_db: Optional[float] = 115.3
    seed: int = 0
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _split_fits(self) -> "DatasetConfig":
        if self.n_train > self.count:
            raise ValueError(f"n_train={self.n_train} exceeds count={self.count}")
        return self


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    erosion_px: int = Field(2, ge=0)
    test_snr_db: Optional[float] = None
    guided_filter: bool = True
    guided_radius: int = Field(DEFAULTS["guided_filter"]["radius"], ge=1)
    guided_eps: float = Field(DEFAULTS["guided_filter"]["eps"], gt=0.0)
    use_default_rois: bool = True


class SweepConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    depths: List[int] = [4, 6, 8]
    deviations: List[float] = [0.0, 0.05, 0.10]
    directions: List[Literal["frequency", "both"]] = ["frequency", "both"]
    multi_jitter_frac: float = Field(0.1, ge=0.0, lt=1.0)


class TimingConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    runs: int = Field(5, ge=1)
    warmup: int = Field(1, ge=0)


class ExperimentConfig(BaseModel):
    """One experiment file: every table is optional and falls back to its defaults"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    grid: GridSpec = GridSpec()
    model_grid: GridSpec = GridSpec(rows=512, cols=512)
    phantom: RandomTemplateSpec = RandomTemplateSpec()
    # overrides of SequenceParams; omitted shifts follow the layout of `grid`
    sequence: Dict[str, Any] = Field(default_factory=dict)
    dataset: DatasetConfig = DatasetConfig()
    detach: DetachParams = DetachParams()
    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    sweep: SweepConfig = SweepConfig()
    timing: TimingConfig = TimingConfig()
    # optional larger grid: reconstruct interpolates onto it by k-space zero-padding
    recon_grid: Optional[GridSpec] = None

    @model_validator(mode="after")
    def _grids_nest(self) -> "ExperimentConfig":
        if self.model_grid.rows % self.grid.rows or self.model_grid.cols % self.grid.cols:
            raise ValueError(f"model grid {self.model_grid.shape} must be a multiple of grid {self.grid.shape}")
        recon = self.recon_grid
        if recon is not None and (recon.rows < self.grid.rows or recon.cols < self.grid.cols):
            raise ValueError(f"recon grid {self.recon_grid.shape} is smaller than grid {self.grid.shape}")
        self.sequence_params()
        return self

    def sequence_params(self, grid: Optional[GridSpec] = None) -> SequenceParams:
        return SequenceParams.for_grid(grid or self.grid, **self.sequence)
