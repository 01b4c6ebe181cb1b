"""
Decomposition Service — plug-in estimators of the three variance components.

    ω1  variance of the expected care level e_i = Σ_z μ_i(z) P(Z = z | x_i)
    ω2  mean over patients of the P(· | x_i)-weighted variance of μ_i(·)
    ω3  residual: total − ω1 − ω2, or the model's own outcome variance

Every path (point estimates, posterior draws, hypothetical assignments)
goes through :func:`build_tables` and :func:`components_from_tables`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Union

import numpy as np

from backend.models.errors import ConfigError, DataError
from backend.models.schemas import (
    AssignmentModelConfig,
    DecompositionResult,
    EffectMode,
    FitDiagnostics,
    LinkFunction,
    OutcomeKind,
    OutcomeModelConfig,
    ResidualMode,
    default_link,
)
from backend.services.dataset import Dataset, default_ddof, empirical_total_variance
from backend.services.glm import AssignmentFit, GlmFit, fit_glm, fit_multinomial
from backend.services.mixed import MixedFit, fit_random_intercept

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-10
RANDOM_EFFECTS_NOTE = (
    "hospital effects are random only as a means of shrinkage; "
    "tau2 is reported next to omega2 and never substituted for it"
)


class OutcomeFit(Protocol):
    """Anything that yields μ_i(z) for every patient and hospital."""
    link: LinkFunction
    sigma2: Optional[float]

    @property
    def hospital_count(self) -> int: ...

    @property
    def covariate_count(self) -> int: ...

    def mean_table(self, covariates: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MuTable:
    """Fitted means μ_i(z) and assignment probabilities P(Z = z | x_i), both (n, m)."""
    mu: np.ndarray
    prob: np.ndarray
    link: LinkFunction
    sigma2: Optional[float] = None
    outcome_source: str = "fixed"
    assignment_source: str = "multinomial"

    def __post_init__(self) -> None:
        if self.mu.shape != self.prob.shape or self.mu.ndim != 2:
            raise DataError(f"table shapes differ: mu {self.mu.shape}, prob {self.prob.shape}")
        if np.any(np.abs(self.prob.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise DataError("assignment probabilities do not sum to 1 per patient")
        if self.link is LinkFunction.LOGIT and np.any((self.mu < 0.0) | (self.mu > 1.0)):
            raise DataError("logit-link means must lie inside [0, 1]")

    @property
    def n(self) -> int:
        return int(self.mu.shape[0])

    @property
    def m(self) -> int:
        return int(self.mu.shape[1])

    @property
    def expected_care(self) -> np.ndarray:
        """e_i = Σ_z μ_i(z) P(Z = z | x_i)."""
        return np.sum(self.mu * self.prob, axis=1)


def _check_dimensions(fit: OutcomeFit, dataset: Dataset) -> None:
    if fit.hospital_count != dataset.m or fit.covariate_count != dataset.p:
        raise DataError(
            f"dimension mismatch: fit has m={fit.hospital_count}, p={fit.covariate_count}; "
            f"dataset has m={dataset.m}, p={dataset.p}"
        )


def build_tables(
    outcome_fit: OutcomeFit,
    assignment_fit: Optional[AssignmentFit],
    dataset: Dataset,
) -> MuTable:
    """
    Evaluate μ_i(z) and P(Z = z | x_i) for all patients and hospitals.

    ``assignment_fit`` may be ``None`` only for single-hospital data.

    Raises:
        DataError: fits and dataset disagree on n, m or p.
    """
    _check_dimensions(outcome_fit, dataset)
    mu = outcome_fit.mean_table(dataset.covariates)

    if assignment_fit is None:
        if dataset.m != 1:
            raise DataError("an assignment fit is required when m > 1")
        prob, source = np.ones((dataset.n, 1)), "single-hospital"
    else:
        if assignment_fit.hospital_count != dataset.m or assignment_fit.covariate_count != dataset.p:
            raise DataError("dimension mismatch between assignment fit and dataset")
        prob, source = assignment_fit.probability_table(dataset.covariates), "multinomial"

    return MuTable(
        mu=mu,
        prob=prob,
        link=outcome_fit.link,
        sigma2=outcome_fit.sigma2,
        outcome_source="random" if isinstance(outcome_fit, MixedFit) else "fixed",
        assignment_source=source,
    )


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------

def omega1(tables: MuTable) -> float:
    """Sample variance (n−1 divisor) of the expected care level."""
    return float(np.var(tables.expected_care, ddof=1))


def omega2(tables: MuTable) -> float:
    """Mean per-patient weighted variance of μ_i(·); never negative."""
    spread = tables.mu - tables.expected_care[:, None]
    return float(np.mean(np.sum(tables.prob * spread ** 2, axis=1)))


def omega3(
    tables: MuTable,
    dataset: Dataset,
    mode: ResidualMode,
    ddof: Optional[int] = None,
) -> float:
    """
    Residual component.

    Subtraction mode returns total − ω1 − ω2 and may be negative.
    Distributional mode returns the Bernoulli average under the logit
    link, or σ̂² under the identity link.

    Raises:
        ConfigError: distributional mode without a model outcome variance.
    """
    match mode:
        case ResidualMode.SUBTRACTION:
            return empirical_total_variance(dataset, ddof) - omega1(tables) - omega2(tables)
        case ResidualMode.DISTRIBUTIONAL:
            if tables.link is LinkFunction.LOGIT:
                return float(np.mean(np.sum(tables.mu * (1.0 - tables.mu) * tables.prob, axis=1)))
            if tables.sigma2 is None:
                raise ConfigError("distributional residual needs a residual variance (sigma2) for the identity link")
            return float(tables.sigma2)


def two_hospital_omega2(tables: MuTable) -> float:
    """(1/n) Σ_i π_i(1−π_i)(μ_i(1) − μ_i(2))² for exactly two hospitals."""
    if tables.m != 2:
        raise DataError(f"two_hospital_omega2 needs m = 2, got m = {tables.m}")
    pi = tables.prob[:, 0]
    gap = tables.mu[:, 0] - tables.mu[:, 1]
    return float(np.mean(pi * (1.0 - pi) * gap ** 2))


def hypothetical_omega2(
    outcome_fit: OutcomeFit,
    dataset: Dataset,
    weights: Union[np.ndarray, list[float]],
) -> float:
    """
    ω2 under a supplied assignment: one probability vector for every
    patient, or a full (n, m) table.
    """
    _check_dimensions(outcome_fit, dataset)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        weights = np.broadcast_to(weights, (dataset.n, dataset.m))
    if weights.shape != (dataset.n, dataset.m):
        raise DataError(f"weights must be (m,) or (n, m); got {weights.shape}")
    tables = MuTable(
        mu=outcome_fit.mean_table(dataset.covariates),
        prob=np.ascontiguousarray(weights),
        link=outcome_fit.link,
        sigma2=outcome_fit.sigma2,
        assignment_source="supplied",
    )
    return omega2(tables)


def equal_weight_omega2(outcome_fit: OutcomeFit, dataset: Dataset) -> float:
    """ω2 with P(Z = z | x) ≡ 1/m."""
    return hypothetical_omega2(outcome_fit, dataset, np.full(dataset.m, 1.0 / dataset.m))


def icc_linear(tau2: float, sigma2: float) -> float:
    """τ²/(τ² + σ²) for an identity-link random-intercept model."""
    if tau2 < 0.0:
        raise ValueError("tau2 must be >= 0")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be > 0")
    return tau2 / (tau2 + sigma2)


@dataclass(frozen=True)
class Components:
    omega1: float
    omega2: float
    omega3: float
    total: float

    def as_array(self) -> np.ndarray:
        return np.array([self.omega1, self.omega2, self.omega3])

    def proportions(self) -> Optional[np.ndarray]:
        if self.total <= 0.0:
            return None
        return self.as_array() / self.total


def components_from_tables(
    tables: MuTable,
    dataset: Dataset,
    residual_mode: ResidualMode,
    ddof: Optional[int] = None,
) -> Components:
    """All three components plus the empirical total they are compared to."""
    w1, w2 = omega1(tables), omega2(tables)
    total = empirical_total_variance(dataset, ddof)
    if residual_mode is ResidualMode.SUBTRACTION:
        w3 = total - w1 - w2
    else:
        w3 = omega3(tables, dataset, residual_mode, ddof)
    return Components(omega1=w1, omega2=w2, omega3=w3, total=total)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FittedModels:
    """Outcome and assignment fits for one dataset under one configuration."""
    outcome: Union[GlmFit, MixedFit]
    assignment: Optional[AssignmentFit]
    link: LinkFunction
    effects: EffectMode
    residual_mode: ResidualMode
    volume_threshold: int


def fit_outcome(dataset: Dataset, link: LinkFunction, effects: EffectMode) -> Union[GlmFit, MixedFit]:
    """Outcome model of the requested effect mode."""
    match effects:
        case EffectMode.FIXED:
            return fit_glm(dataset, link)
        case EffectMode.RANDOM:
            return fit_random_intercept(dataset, link)


def fit_models(
    dataset: Dataset,
    outcome_config: OutcomeModelConfig,
    assignment_config: AssignmentModelConfig,
) -> FittedModels:
    """Fit the outcome and assignment models a decomposition needs."""
    link = outcome_config.link or default_link(dataset.outcome_kind)
    if link is LinkFunction.LOGIT and dataset.outcome_kind is not OutcomeKind.BINARY:
        raise DataError("logit link requires a binary outcome in {0,1}")
    outcome = fit_outcome(dataset, link, outcome_config.effects)
    assignment = fit_multinomial(dataset, assignment_config.volume_threshold) if dataset.m > 1 else None
    return FittedModels(
        outcome=outcome,
        assignment=assignment,
        link=link,
        effects=outcome_config.effects,
        residual_mode=outcome_config.residual_mode,
        volume_threshold=assignment_config.volume_threshold,
    )


def _diagnostics(models: FittedModels, dataset: Dataset) -> FitDiagnostics:
    outcome = models.outcome
    assignment = models.assignment
    common = dict(
        outcome_converged=outcome.converged,
        outcome_iterations=outcome.iterations,
        sigma2=outcome.sigma2,
        volume_threshold=models.volume_threshold,
        equal_weight_omega2=equal_weight_omega2(outcome, dataset),
    )
    if assignment is not None:
        common.update(
            assignment_converged=assignment.converged,
            assignment_iterations=assignment.iterations,
            assignment_separated=assignment.separated,
            intercept_only_hospitals=int(assignment.intercept_only[1:].sum()),
        )
    if isinstance(outcome, MixedFit):
        return FitDiagnostics(
            outcome_model=f"random-intercept/{models.link.value}",
            tau2=outcome.tau2,
            lr_statistic=outcome.lr_statistic,
            icc=outcome.icc,
            note=RANDOM_EFFECTS_NOTE,
            **common,
        )
    return FitDiagnostics(
        outcome_model=f"fixed-effects/{models.link.value}",
        outcome_separated=outcome.separated,
        **common,
    )


def decompose_fitted(
    models: FittedModels,
    dataset: Dataset,
    residual_mode: Optional[ResidualMode] = None,
) -> DecompositionResult:
    """Evaluate the decomposition for already-fitted models."""
    mode = residual_mode or models.residual_mode
    ddof = default_ddof(dataset)
    tables = build_tables(models.outcome, models.assignment, dataset)
    parts = components_from_tables(tables, dataset, mode, ddof)

    negative = parts.omega3 < 0.0
    if negative:
        logger.warning("Residual component is negative (%.6g); reported unclamped", parts.omega3)

    proportions = parts.proportions()
    total_divisor = "n" if ddof == 0 else "n-1"
    logger.info(
        "Decomposition: omega1=%.6g, omega2=%.6g, omega3=%.6g, total=%.6g",
        parts.omega1, parts.omega2, parts.omega3, parts.total,
    )
    return DecompositionResult(
        omega1=parts.omega1,
        omega2=parts.omega2,
        omega3=parts.omega3,
        total=parts.total,
        proportions=None if proportions is None else proportions.tolist(),
        residual_mode=mode,
        negative_residual=negative,
        total_divisor=total_divisor,
        total_variance_n=empirical_total_variance(dataset, 0),
        total_variance_n1=empirical_total_variance(dataset, 1),
        divisors={
            "omega1": "n-1",
            "omega2": "n",
            "omega3": total_divisor if mode is ResidualMode.SUBTRACTION else "n",
        },
        n=dataset.n,
        m=dataset.m,
        link=models.link,
        effects=models.effects,
        diagnostics=_diagnostics(models, dataset),
    )


def decompose(
    dataset: Dataset,
    outcome_config: OutcomeModelConfig,
    assignment_config: AssignmentModelConfig,
) -> DecompositionResult:
    """Fit the configured models and return (ω1, ω2, ω3), total and proportions."""
    return decompose_fitted(fit_models(dataset, outcome_config, assignment_config), dataset)
