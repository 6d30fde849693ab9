from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional

import numpy as np

LINK_NAMES = ("exp_pos", "exp_neg", "neg_square", "linear", "power_family")
DESIGNS = ("sim", "fsim", "appendixA")
ALTERNATIVES = ("two-sided", "greater", "less")


class BasisSpec(BaseModel):
    """Schema for a serialized basis system"""
    kind: Literal["bspline", "fourier"]
    domain: List[float]
    n_basis: int
    order: int = 0  # bspline only
    knots: List[float] = []  # interior knots, bspline only


class LinkSpec(BaseModel):
    """Schema for a link function from the registry"""
    name: Literal["exp_pos", "exp_neg", "neg_square", "linear", "power_family"]
    eta: float = 0.0  # power_family only


class LambdaGridSpec(BaseModel):
    """Schema for a log10-spaced smoothing parameter grid"""
    log10_min: float
    log10_max: float
    n_points: int = Field(ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.log10_max < self.log10_min:
            raise ValueError("log10_max must be >= log10_min")
        return self

    def values(self) -> np.ndarray:
        if self.n_points == 1:
            return np.array([10.0 ** self.log10_min])
        return np.logspace(self.log10_min, self.log10_max, self.n_points)


class StudyConfig(BaseModel):
    """Schema for one rejection-rate study"""
    design: Literal["sim", "fsim", "appendixA"]
    n: int = Field(default=100, ge=10)
    sigma: float = 0.1
    link: LinkSpec
    n_reps: int = 200
    # lambda for Test 1, lambda_g for the functional designs; None means the design default
    lambda_grid: Optional[LambdaGridSpec] = None
    # second grid axis (lambda_beta), functional designs only
    lambda_beta_grid: Optional[LambdaGridSpec] = None
    n_null_draws: int = Field(default=5000, ge=1000)
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    alternative: Literal["two-sided", "greater", "less"] = "two-sided"
    base_seed: int = 0
    exclude_failures: bool = False  # default: failed replicates count as non-reject
    jobs: int = Field(default=1, ge=1)

    @field_validator("n_reps")
    @classmethod
    def _positive_reps(cls, v: int) -> int:
        if v < 1:
            raise ValueError("n_reps must be >= 1")
        return v

    @field_validator("sigma")
    @classmethod
    def _nonnegative_sigma(cls, v: float) -> float:
        if v < 0:
            raise ValueError("sigma must be >= 0")
        return v


class ReplicateOutcome(BaseModel):
    """Schema for a single replicate of a rejection study"""
    replicate: int
    seed: int
    reject: bool = False
    T_obs: Optional[float] = None
    crit: Optional[float] = None
    sign_summary: Optional[str] = None
    sigma_hat: Optional[float] = None
    failed: bool = False
    error: Optional[str] = None


class StudyResult(BaseModel):
    """Schema for the outcome of a rejection study"""
    config: StudyConfig
    rate: float
    n_rejected: int
    n_failed: int
    n_effective: int
    per_seed: List[ReplicateOutcome]


class PowerPoint(BaseModel):
    """Schema for one row of a power curve"""
    eta: float
    rate: float
    n_reps: int
    n: int
    sigma: float


class SigmaUsed(BaseModel):
    """Schema for the residual scale reused across a surface"""
    sigma_hat: float
    cell: int
    lambda_g: float
    lambda_beta: Optional[float] = None


class SurfaceEnvelope(BaseModel):
    """Schema for the JSON companion of a Jensen surface CSV"""
    test: Literal["t1", "fsim"]
    T_obs: float
    crit: float
    alpha: float
    alternative: str = "two-sided"
    seed: int
    n_null_draws: int
    reject: bool
    sign_summary: Literal["all-positive", "all-negative", "mixed"]
    sigma_used: SigmaUsed
    grid_shape: List[int]
    failed_cells: List[int] = []
    failure_reasons: Dict[str, str] = {}
    gcv_cell: int
    argmax_delta_cell: int
    argmin_delta_cell: int
    null_correlation: List[List[float]] = []


class FitRecord(BaseModel):
    """Schema for a serialized functional single index fit"""
    lambda_g: float
    lambda_beta: float
    c: List[float]
    d: List[float]
    beta_basis: BasisSpec
    g_basis: BasisSpec
    S_range: float
    index: List[float]
    index_bar: float
    sigma_hat: float
    objective: float
    converged: bool
    n_restarts_used: int
    n_clamped: int
    flagged: bool
    gcv: Optional[float] = None


class DatasetFile(BaseModel):
    """Schema for an assembled functional dataset on disk"""
    t_grid: List[float]
    X: List[List[float]]
    Y: List[float]
    site_ids: List[str] = []
    obs_times: List[float] = []
    beta_basis: Optional[BasisSpec] = None
    g_n_basis: int = 25
    g_order: int = 4
    lambda_g_grid: Optional[LambdaGridSpec] = None
    lambda_beta_grid: Optional[LambdaGridSpec] = None
    notes: Dict[str, Any] = {}

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.X) != len(self.Y):
            raise ValueError(f"X has {len(self.X)} rows but Y has {len(self.Y)} entries")
        width = len(self.t_grid)
        for i, row in enumerate(self.X):
            if len(row) != width:
                raise ValueError(f"X row {i} has {len(row)} values, t_grid has {width}")
        return self


class CurvatureFit(BaseModel):
    """Schema for one initialization in the curvature demonstration"""
    init: str
    rse: float
    rase: List[float]  # k = 0, 1, 2
    objective: float
    c_norm: float
    sup_abs_g2: float


class CurvatureReport(BaseModel):
    """Schema for the curvature-instability demonstration report"""
    seed: int
    n: int
    link: LinkSpec
    lambda_g: float
    lambda_beta: float
    fits: List[CurvatureFit]
    sup_diff_g2: float
    rase0_rel_diff: float
    rase2_rel_diff: float
    sup_g2_rel_diff: float


class RunManifest(BaseModel):
    """Schema for the manifest written next to every CLI output"""
    subcommand: str
    version: str
    config: Dict[str, Any]
    input_digests: Dict[str, str] = {}
    output_digests: Dict[str, str] = {}
    started_at: str
    finished_at: Optional[str] = None
