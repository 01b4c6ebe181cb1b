"""
Pydantic Schemas for configuration, results and API contracts.

Every run configuration and every serialized result is defined here so
that the CLI, the routers and the pipeline share one validated vocabulary.
"""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special

from backend.config import (
    DEFAULT_DRAWS,
    DEFAULT_LEVEL,
    DEFAULT_ORACLE_DRAWS,
    DEFAULT_REPLICATIONS,
    DEFAULT_VOLUME_THRESHOLD,
)


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------
class LinkFunction(str, Enum):
    """Outcome-model link g with its inverse."""
    IDENTITY = "identity"
    LOGIT = "logit"

    def link(self, mu: np.ndarray | float) -> np.ndarray:
        """g(μ)."""
        mu = np.asarray(mu, dtype=float)
        if self is LinkFunction.LOGIT:
            return special.logit(mu)
        return mu.copy()

    def inverse(self, eta: np.ndarray | float) -> np.ndarray:
        """g⁻¹(η); the logit inverse stays strictly inside (0, 1)."""
        eta = np.asarray(eta, dtype=float)
        if self is LinkFunction.LOGIT:
            return special.expit(eta)
        return eta.copy()


class EffectMode(str, Enum):
    """How hospital intercepts enter the outcome model."""
    FIXED = "fixed"
    RANDOM = "random"


class ResidualMode(str, Enum):
    """How ω3 is obtained."""
    SUBTRACTION = "subtraction"
    DISTRIBUTIONAL = "distributional"


class OutcomeKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class Subcommand(str, Enum):
    DECOMPOSE = "decompose"
    SIMULATE = "simulate"
    ORACLE = "oracle"
    META = "meta"


class Estimator(str, Enum):
    """Outcome-model specification used inside a simulation study."""
    FE = "FE"
    RE = "RE"

    @property
    def effects(self) -> EffectMode:
        return EffectMode.FIXED if self is Estimator.FE else EffectMode.RANDOM


def default_link(kind: OutcomeKind) -> LinkFunction:
    """Canonical link for an outcome kind."""
    return LinkFunction.LOGIT if kind is OutcomeKind.BINARY else LinkFunction.IDENTITY


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------
class OutcomeModelConfig(BaseModel):
    """Outcome model specification; ``link=None`` picks the canonical link."""
    link: Optional[LinkFunction] = None
    effects: EffectMode = EffectMode.FIXED
    residual_mode: ResidualMode = ResidualMode.SUBTRACTION


class AssignmentModelConfig(BaseModel):
    """Multinomial assignment model specification."""
    volume_threshold: int = Field(
        DEFAULT_VOLUME_THRESHOLD, ge=0,
        description="Hospitals with fewer patients get intercept-only terms",
    )


class HospitalParams(BaseModel):
    """Fixed generating-mechanism parameters, hospital 1 first."""
    gamma: list[float] = Field(..., description="Assignment intercepts γ_z (γ_1 = 0)")
    phi: list[list[float]] = Field(..., description="Assignment slopes φ_z, one row per hospital")
    alpha: list[float] = Field(..., description="Outcome hospital effects α_z")

    @model_validator(mode="after")
    def _check_shapes(self) -> "HospitalParams":
        m = len(self.alpha)
        if len(self.gamma) != m or len(self.phi) != m:
            raise ValueError("gamma, phi and alpha must all have one entry per hospital")
        if len({len(row) for row in self.phi}) > 1:
            raise ValueError("every phi row must have the same length")
        return self


class SimulationConfig(BaseModel):
    """Generating mechanism of the simulation study."""
    n: int = Field(..., ge=2, description="Patients per replicate")
    m: int = Field(..., ge=2, description="Hospitals")
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS
    seed: int = Field(0, ge=0, description="Master seed")
    hospital_params: Optional[HospitalParams] = None
    zero_hospital_effect: bool = Field(False, description="All α_z equal (no causal hospital effect)")
    randomized_assignment: bool = Field(False, description="γ = φ = 0 (assignment independent of X)")
    no_casemix_effect: bool = Field(False, description="β = 0 in the outcome model")

    @model_validator(mode="after")
    def _check_sizes(self) -> "SimulationConfig":
        if self.n < self.m:
            raise ValueError(f"n ({self.n}) must be at least m ({self.m})")
        if self.hospital_params is not None and len(self.hospital_params.alpha) != self.m:
            raise ValueError("hospital_params must describe exactly m hospitals")
        return self


class RunConfig(BaseModel):
    """Fully resolved configuration of one CLI run; echoed into every output."""
    model_config = ConfigDict(extra="forbid")

    subcommand: Subcommand
    input: Optional[Path] = None
    outcome_col: str = "outcome"
    hospital_col: str = "hospital"
    covariate_cols: Optional[list[str]] = None
    outcome_kind: Optional[OutcomeKind] = None
    link: Optional[LinkFunction] = None
    effects: EffectMode = EffectMode.FIXED
    residual_mode: ResidualMode = ResidualMode.SUBTRACTION
    volume_threshold: int = Field(DEFAULT_VOLUME_THRESHOLD, ge=0)
    intervals: bool = True
    draws: int = Field(DEFAULT_DRAWS, ge=1)
    level: float = Field(DEFAULT_LEVEL, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    simulation: Optional[SimulationConfig] = None
    replications: int = Field(DEFAULT_REPLICATIONS, ge=1)
    estimators: list[Estimator] = Field(default_factory=lambda: [Estimator.FE, Estimator.RE])
    oracle_draws: int = Field(DEFAULT_ORACLE_DRAWS, ge=1)
    output: Optional[Path] = None
    csv_output: Optional[Path] = None
    draws_output: Optional[Path] = None
    replicates_output: Optional[Path] = None
    threads: Optional[int] = Field(None, ge=1, exclude=True, description="Worker count; never echoed")

    def outcome_model(self) -> OutcomeModelConfig:
        return OutcomeModelConfig(link=self.link, effects=self.effects, residual_mode=self.residual_mode)

    def assignment_model(self) -> AssignmentModelConfig:
        return AssignmentModelConfig(volume_threshold=self.volume_threshold)


# ---------------------------------------------------------------------------
# Result Models
# ---------------------------------------------------------------------------
class Interval(BaseModel):
    lower: float
    upper: float


class IntervalSet(BaseModel):
    """Quantile credible intervals keyed by component or proportion name."""
    level: float
    quantile_method: str
    bounds: dict[str, Interval]


class FitDiagnostics(BaseModel):
    """Fit metadata carried alongside a decomposition."""
    outcome_model: str
    outcome_converged: bool
    outcome_iterations: int
    outcome_separated: bool = False
    tau2: Optional[float] = None
    sigma2: Optional[float] = None
    lr_statistic: Optional[float] = None
    icc: Optional[float] = None
    assignment_converged: bool = True
    assignment_iterations: int = 0
    assignment_separated: bool = False
    intercept_only_hospitals: int = 0
    volume_threshold: int = DEFAULT_VOLUME_THRESHOLD
    equal_weight_omega2: Optional[float] = None
    note: Optional[str] = None


class DecompositionResult(BaseModel):
    """Three-way decomposition of the observed outcome variance."""
    omega1: float = Field(..., ge=0.0, description="Variance explained by case-mix")
    omega2: float = Field(..., ge=0.0, description="Between-hospital variance given case-mix")
    omega3: float = Field(..., description="Residual variance")
    total: float = Field(..., ge=0.0)
    proportions: Optional[list[float]] = Field(None, description="Components over total, when total > 0")
    residual_mode: ResidualMode
    negative_residual: bool = False
    total_divisor: str = Field(..., description="'n' or 'n-1'")
    total_variance_n: float
    total_variance_n1: float
    divisors: dict[str, str] = Field(
        default_factory=lambda: {"omega1": "n-1", "omega2": "n", "omega3": "n"}
    )
    n: int
    m: int
    link: LinkFunction
    effects: EffectMode
    intervals: Optional[IntervalSet] = None
    draws: Optional[int] = None
    dropped_draws: Optional[int] = None
    diagnostics: Optional[FitDiagnostics] = None


class TruthOracle(BaseModel):
    """Population decomposition implied by a known generating mechanism."""
    omega1: float = Field(..., ge=0.0)
    omega2: float = Field(..., ge=0.0)
    omega3: float = Field(..., ge=0.0)
    omega1_se: float = Field(..., ge=0.0)
    omega2_se: float = Field(..., ge=0.0)
    omega3_se: float = Field(..., ge=0.0)
    oracle_draws: int
    batches: int
    seed: int


class HospitalQi(BaseModel):
    """Indirectly standardized quality indicator of one hospital."""
    label: str
    theta: float
    s2: float = Field(..., gt=0.0)
    observed: float
    expected: float = Field(..., gt=0.0)
    volume: int


class MetaResult(BaseModel):
    """DerSimonian–Laird heterogeneity summary."""
    tau2: float = Field(..., ge=0.0)
    i2: float = Field(..., ge=0.0, lt=1.0)
    q: float = Field(..., ge=0.0)
    df: int
    q_pvalue: float
    theta_bar: float


class MetaReport(BaseModel):
    hospitals: list[HospitalQi]
    result: MetaResult


class StudyRow(BaseModel):
    """Sampling-distribution summary of one estimator × component."""
    estimator: Estimator
    component: str
    mean: float
    sd: float
    q025: float
    q975: float
    mc_lower: float
    mc_upper: float
    truth: Optional[float] = None
    truth_se: Optional[float] = None
    replications: int


class ReplicateRecord(BaseModel):
    replicate: int
    estimator: Estimator
    omega1: float
    omega2: float
    omega3: float
    equal_weight_omega2: float
    tau2: Optional[float] = None


class StudySummary(BaseModel):
    config: SimulationConfig
    replications: int
    failures: int
    oracle: TruthOracle
    rows: list[StudyRow]
    replicates: list[ReplicateRecord] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# Report envelopes (config echo + payload)
# ---------------------------------------------------------------------------
class DecomposeReport(BaseModel):
    config: RunConfig
    result: DecompositionResult


class OracleReport(BaseModel):
    config: RunConfig
    truth: TruthOracle


class SimulateReport(BaseModel):
    config: RunConfig
    summary: StudySummary


class MetaRunReport(BaseModel):
    config: RunConfig
    report: MetaReport


# ---------------------------------------------------------------------------
# API Request Models
# ---------------------------------------------------------------------------
class DecomposeRequest(BaseModel):
    """Body of POST /decompose."""
    records: list[dict[str, Any]] = Field(..., min_length=2, description="Patient rows")
    outcome: str = "outcome"
    hospital: str = "hospital"
    covariates: Optional[list[str]] = None
    outcome_kind: Optional[OutcomeKind] = None
    link: Optional[LinkFunction] = None
    effects: EffectMode = EffectMode.FIXED
    residual_mode: ResidualMode = ResidualMode.SUBTRACTION
    volume_threshold: int = Field(DEFAULT_VOLUME_THRESHOLD, ge=0)
    draws: int = Field(0, ge=0, description="Posterior draws; 0 skips intervals")
    level: float = Field(DEFAULT_LEVEL, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)


class OracleRequest(BaseModel):
    """Body of POST /oracle."""
    config: SimulationConfig
    oracle_draws: int = Field(100_000, ge=1)


class MetaRequest(BaseModel):
    """Body of POST /meta."""
    records: list[dict[str, Any]] = Field(..., min_length=2)
    outcome: str = "outcome"
    hospital: str = "hospital"
    covariates: Optional[list[str]] = None
