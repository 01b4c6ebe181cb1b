"""
Uncertainty Service — approximate posterior draws of (ω1, ω2, ω3).

θ (outcome model) is drawn by parametric bootstrap: outcomes are
resampled from the fitted model at the observed (z_i, x_i) and refitted.
η (assignment model) is drawn from its normal approximation. The two are
drawn from separate RNG substreams and paired by draw index; every pair
is pushed through the same table/component code as the point estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from backend.config import MAX_DROPPED_FRACTION, MIN_DRAWS_FOR_QUANTILES, QUANTILE_METHOD
from backend.models.errors import DataError, NumericalError
from backend.models.schemas import DecompositionResult, Interval, IntervalSet, LinkFunction, ResidualMode
from backend.services.dataset import Dataset, default_ddof
from backend.services.decomposition import FittedModels, build_tables, components_from_tables
from backend.services.glm import AssignmentFit, GlmFit, fit_glm
from backend.services.mixed import MixedFit, fit_random_intercept
from backend.utils.rng import Stream, generator

logger = logging.getLogger(__name__)

COMPONENTS = ("omega1", "omega2", "omega3")
OutcomeFit = Union[GlmFit, MixedFit]


def n_jobs(threads: Optional[int]) -> int:
    """joblib worker count; ``None`` means every available core."""
    return -1 if threads is None else int(threads)


# ---------------------------------------------------------------------------
# η draws
# ---------------------------------------------------------------------------

def _symmetric_root(covariance: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(0.5 * (covariance + covariance.T))
    tolerance = 1e-12 * max(float(np.max(np.abs(values), initial=0.0)), 1.0)
    negative = values < -tolerance
    if np.any(negative):
        logger.warning("Clipping %d negative eigenvalue(s) of the assignment covariance", int(negative.sum()))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def draw_eta(fit: AssignmentFit, draws: int, seed: int) -> np.ndarray:
    """
    ``draws`` normal draws of the free assignment parameters around η̂.

    Row ``b`` depends only on (seed, b). Pinned slopes are not part of η,
    so they stay exactly zero in every ``fit.with_eta(row)``.
    """
    if draws < 1:
        raise DataError("draw count must be >= 1")
    root = _symmetric_root(fit.eta_covariance)
    centre = fit.eta
    out = np.empty((draws, centre.size))
    for b in range(draws):
        out[b] = centre + root @ generator(seed, Stream.ETA, b).standard_normal(centre.size)
    return out


# ---------------------------------------------------------------------------
# θ draws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaDraws:
    """Bootstrap refits by draw index; ``None`` marks a dropped replicate."""
    fits: tuple[Optional[OutcomeFit], ...]

    @property
    def kept(self) -> list[int]:
        return [b for b, fit in enumerate(self.fits) if fit is not None]

    @property
    def dropped(self) -> int:
        return len(self.fits) - len(self.kept)


def resample_outcome(fit: OutcomeFit, dataset: Dataset, rng: np.random.Generator) -> np.ndarray:
    """One outcome vector from the fitted model at the observed hospitals and case-mix."""
    mu = fit.mean_table(dataset.covariates)[np.arange(dataset.n), dataset.hospital]
    if fit.link is LinkFunction.LOGIT:
        return (rng.random(dataset.n) < mu).astype(float)
    return mu + np.sqrt(fit.sigma2 or 0.0) * rng.standard_normal(dataset.n)


def refit(fit: OutcomeFit, dataset: Dataset) -> OutcomeFit:
    """Refit *dataset* with the same link and effect mode as *fit*."""
    if isinstance(fit, MixedFit):
        return fit_random_intercept(dataset, fit.link)
    return fit_glm(dataset, fit.link, include_hospitals=fit.includes_hospitals)


def _theta_replicate(fit: OutcomeFit, dataset: Dataset, seed: int, index: int) -> Optional[OutcomeFit]:
    outcome = resample_outcome(fit, dataset, generator(seed, Stream.THETA, index))
    try:
        return refit(fit, dataset.with_outcome(outcome))
    except (NumericalError, linalg.LinAlgError) as exc:
        logger.warning("Bootstrap replicate %d dropped: %s", index, exc)
        return None


def bootstrap_theta(
    fit: OutcomeFit,
    dataset: Dataset,
    draws: int,
    seed: int,
    threads: Optional[int] = None,
) -> ThetaDraws:
    """
    Parametric bootstrap of the outcome model.

    Raises:
        NumericalError: more than ``MAX_DROPPED_FRACTION`` of the refits failed.
    """
    if draws < 1:
        raise DataError("draw count must be >= 1")
    fits = Parallel(n_jobs=n_jobs(threads), prefer="threads")(
        delayed(_theta_replicate)(fit, dataset, seed, b) for b in range(draws)
    )
    result = ThetaDraws(fits=tuple(fits))
    if result.dropped:
        logger.warning("%d of %d bootstrap refits dropped", result.dropped, draws)
    if result.dropped > MAX_DROPPED_FRACTION * draws:
        raise NumericalError(f"{result.dropped} of {draws} bootstrap refits failed")
    return result


# ---------------------------------------------------------------------------
# Component draws and intervals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorDraws:
    """Paired (θ_b, η_b) draws and the components they imply."""
    theta_draws: tuple[OutcomeFit, ...]
    eta_draws: np.ndarray
    component_draws: np.ndarray
    total: float
    seed: int
    dropped: int = 0

    @property
    def count(self) -> int:
        return int(self.component_draws.shape[0])

    @property
    def proportion_draws(self) -> Optional[np.ndarray]:
        if self.total <= 0.0:
            return None
        return self.component_draws / self.total


def _component_draw(
    theta: OutcomeFit,
    assignment: Optional[AssignmentFit],
    dataset: Dataset,
    residual_mode: ResidualMode,
    ddof: int,
) -> np.ndarray:
    tables = build_tables(theta, assignment, dataset)
    return components_from_tables(tables, dataset, residual_mode, ddof).as_array()


def posterior_draws(
    models: FittedModels,
    dataset: Dataset,
    draws: int,
    seed: int,
    threads: Optional[int] = None,
) -> PosteriorDraws:
    """Draw θ and η independently and evaluate the decomposition for each pair."""
    ddof = default_ddof(dataset)
    theta = bootstrap_theta(models.outcome, dataset, draws, seed, threads)
    kept = theta.kept

    if models.assignment is None:
        etas = np.empty((draws, 0))
        assignments = [None] * draws
    else:
        etas = draw_eta(models.assignment, draws, seed)
        assignments = [models.assignment.with_eta(row) for row in etas]

    rows = Parallel(n_jobs=n_jobs(threads), prefer="threads")(
        delayed(_component_draw)(theta.fits[b], assignments[b], dataset, models.residual_mode, ddof)
        for b in kept
    )
    component_draws = np.vstack(rows) if rows else np.empty((0, 3))
    logger.info("Posterior draws: %d kept, %d dropped", len(kept), theta.dropped)

    return PosteriorDraws(
        theta_draws=tuple(theta.fits[b] for b in kept),
        eta_draws=etas[kept],
        component_draws=component_draws,
        total=float(np.var(dataset.outcome, ddof=ddof)),
        seed=seed,
        dropped=theta.dropped,
    )


def credible_intervals(draws: PosteriorDraws, level: float) -> IntervalSet:
    """
    Equal-tailed quantile intervals for each component and each proportion.

    Quantiles use linear interpolation between order statistics.

    Raises:
        DataError: no draws, or a level outside (0, 1).
    """
    if draws.count == 0:
        raise DataError("no posterior draws to summarize")
    if not 0.0 < level < 1.0:
        raise DataError("level must lie in (0, 1)")
    if draws.count < MIN_DRAWS_FOR_QUANTILES:
        logger.warning("Only %d draws; quantile intervals are crude", draws.count)

    tail = (1.0 - level) / 2.0
    probs = [tail, 1.0 - tail]
    bounds: dict[str, Interval] = {}

    quantiles = np.quantile(draws.component_draws, probs, axis=0, method=QUANTILE_METHOD)
    for j, name in enumerate(COMPONENTS):
        bounds[name] = Interval(lower=float(quantiles[0, j]), upper=float(quantiles[1, j]))

    proportions = draws.proportion_draws
    if proportions is not None:
        quantiles = np.quantile(proportions, probs, axis=0, method=QUANTILE_METHOD)
        for j, name in enumerate(COMPONENTS):
            bounds[f"proportion_{name}"] = Interval(lower=float(quantiles[0, j]), upper=float(quantiles[1, j]))

    return IntervalSet(level=level, quantile_method=QUANTILE_METHOD, bounds=bounds)


def with_intervals(result: DecompositionResult, draws: PosteriorDraws, level: float) -> DecompositionResult:
    """Copy of *result* carrying the credible intervals of *draws*."""
    return result.model_copy(update={
        "intervals": credible_intervals(draws, level),
        "draws": draws.count,
        "dropped_draws": draws.dropped,
    })
