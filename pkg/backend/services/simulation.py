"""
Simulation Service — generating mechanism, truth oracle and study harness.

Patients carry X1 ~ N(0, 1) and X2 ~ Bernoulli(0.5); the hospital is
drawn from a multinomial-logistic model, and the latent outcome is
α_Z + X1 + 2·X2 + Logistic(0, 1), dichotomized at zero for binary
studies. Hospital parameters are drawn once per study and then held
fixed across replications.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg, special

from backend.config import (
    ALPHA_SD,
    CASEMIX_EFFECTS,
    DEFAULT_ORACLE_BATCHES,
    DEFAULT_ORACLE_DRAWS,
    GAMMA_SD,
    LOGISTIC_VARIANCE,
    MAX_ASSIGNMENT_ATTEMPTS,
    MAX_DROPPED_FRACTION,
    PHI_SD,
    QUANTILE_METHOD,
    X2_PROBABILITY,
)
from backend.models.errors import DataError, NumericalError, VarianceLabError
from backend.models.schemas import (
    Estimator,
    HospitalParams,
    OutcomeKind,
    ReplicateRecord,
    ResidualMode,
    SimulationConfig,
    StudyRow,
    StudySummary,
    TruthOracle,
    default_link,
)
from backend.services.dataset import Dataset, default_ddof, validate
from backend.services.decomposition import build_tables, components_from_tables, equal_weight_omega2, fit_outcome
from backend.services.glm import fit_multinomial
from backend.services.mixed import MixedFit
from backend.services.uncertainty import n_jobs
from backend.utils.rng import Stream, child_seed, generator

logger = logging.getLogger(__name__)

COVARIATE_NAMES = ("x1", "x2")
SUMMARY_COMPONENTS = ("omega1", "omega2", "omega3", "equal_weight_omega2", "tau2")


# ---------------------------------------------------------------------------
# Generating mechanism
# ---------------------------------------------------------------------------

def draw_hospital_params(m: int, seed: int) -> HospitalParams:
    """γ_z ~ N(0, 0.25), φ_z ~ N(0, 0.5 I), α_z ~ N(0, 4); hospital 1 is the assignment reference."""
    rng = generator(seed, Stream.HYPERPARAMETERS)
    gamma = rng.normal(0.0, GAMMA_SD, m)
    phi = rng.normal(0.0, PHI_SD, (m, len(CASEMIX_EFFECTS)))
    alpha = rng.normal(0.0, ALPHA_SD, m)
    gamma[0] = 0.0
    phi[0] = 0.0
    return HospitalParams(gamma=gamma.tolist(), phi=phi.tolist(), alpha=alpha.tolist())


def with_hospital_params(config: SimulationConfig) -> SimulationConfig:
    """Config with hospital parameters populated, drawing them from the config seed if absent."""
    if config.hospital_params is not None:
        return config
    return config.model_copy(update={"hospital_params": draw_hospital_params(config.m, config.seed)})


@dataclass(frozen=True)
class Mechanism:
    """Known generating parameters after the scenario switches are applied."""
    gamma: np.ndarray
    phi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    outcome_kind: OutcomeKind

    @property
    def m(self) -> int:
        return int(self.alpha.size)

    def assignment_probabilities(self, covariates: np.ndarray) -> np.ndarray:
        return special.softmax(self.gamma[None, :] + covariates @ self.phi.T, axis=1)

    def latent_means(self, covariates: np.ndarray) -> np.ndarray:
        return self.alpha[None, :] + (covariates @ self.beta)[:, None]

    def outcome_means(self, covariates: np.ndarray) -> np.ndarray:
        """E[Y(z) | X] for every hospital; P(latent ≥ 0) for binary outcomes."""
        latent = self.latent_means(covariates)
        if self.outcome_kind is OutcomeKind.BINARY:
            return special.expit(latent)
        return latent


def mechanism(config: SimulationConfig) -> Mechanism:
    config = with_hospital_params(config)
    params = config.hospital_params
    gamma = np.asarray(params.gamma, dtype=float)
    phi = np.asarray(params.phi, dtype=float)
    alpha = np.asarray(params.alpha, dtype=float)
    beta = np.asarray(CASEMIX_EFFECTS, dtype=float)
    if phi.shape[1] != beta.size:
        raise DataError(f"phi rows must have {beta.size} entries")
    if config.zero_hospital_effect:
        alpha = np.zeros_like(alpha)
    if config.randomized_assignment:
        gamma, phi = np.zeros_like(gamma), np.zeros_like(phi)
    if config.no_casemix_effect:
        beta = np.zeros_like(beta)
    return Mechanism(gamma=gamma, phi=phi, alpha=alpha, beta=beta, outcome_kind=config.outcome_kind)


def _draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    x1 = rng.standard_normal(n)
    x2 = (rng.random(n) < X2_PROBABILITY).astype(float)
    return np.column_stack([x1, x2])


def _draw_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return np.minimum((cumulative < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def generate(config: SimulationConfig, replicate_seed: int) -> Dataset:
    """
    One simulated dataset of ``config.n`` patients.

    Continuous and binary configs with the same seeds share every random
    draw, so the binary outcome is exactly 1{continuous outcome ≥ 0}.

    Raises:
        DataError: a hospital stayed empty after ``MAX_ASSIGNMENT_ATTEMPTS`` assignment draws.
    """
    mech = mechanism(config)
    rng = generator(replicate_seed, Stream.REPLICATES)
    covariates = _draw_covariates(rng, config.n)
    probs = mech.assignment_probabilities(covariates)

    for _ in range(MAX_ASSIGNMENT_ATTEMPTS):
        hospital = _draw_categorical(rng, probs)
        if np.bincount(hospital, minlength=mech.m).min() > 0:
            break
    else:
        raise DataError(f"a hospital received no patients in {MAX_ASSIGNMENT_ATTEMPTS} assignment draws")

    latent = mech.latent_means(covariates)[np.arange(config.n), hospital] + rng.logistic(0.0, 1.0, config.n)
    outcome = (latent >= 0.0).astype(float) if config.outcome_kind is OutcomeKind.BINARY else latent
    return validate(outcome, hospital + 1, covariates, COVARIATE_NAMES, config.outcome_kind)


# ---------------------------------------------------------------------------
# Truth oracle
# ---------------------------------------------------------------------------

def oracle_truth(
    config: SimulationConfig,
    oracle_draws: int = DEFAULT_ORACLE_DRAWS,
    seed: int = 0,
    batches: int = DEFAULT_ORACLE_BATCHES,
) -> TruthOracle:
    """
    Population (ω1, ω2, ω3) of the known mechanism by Monte Carlo over X.

    Means and assignment probabilities are exact given X; only the X
    integral is simulated. The continuous residual is the Logistic(0, 1)
    variance π²/3 with zero standard error. SEs come from batch means.
    """
    if oracle_draws < 4:
        raise DataError("oracle_draws must be at least 4")
    mech = mechanism(config)
    batches = max(2, min(batches, oracle_draws // 2))
    sizes = [len(chunk) for chunk in np.array_split(np.arange(oracle_draws), batches)]

    care_levels = []
    batch_w1, batch_w2, batch_w3 = np.empty(batches), np.empty(batches), np.empty(batches)
    for k, size in enumerate(sizes):
        covariates = _draw_covariates(generator(seed, Stream.ORACLE, k), size)
        mu = mech.outcome_means(covariates)
        prob = mech.assignment_probabilities(covariates)
        care = np.sum(mu * prob, axis=1)
        care_levels.append(care)
        batch_w1[k] = np.var(care, ddof=1)
        batch_w2[k] = np.mean(np.sum(prob * (mu - care[:, None]) ** 2, axis=1))
        if mech.outcome_kind is OutcomeKind.BINARY:
            batch_w3[k] = np.mean(np.sum(prob * mu * (1.0 - mu), axis=1))

    def se(values: np.ndarray) -> float:
        return float(np.std(values, ddof=1) / math.sqrt(batches))

    if mech.outcome_kind is OutcomeKind.BINARY:
        w3, w3_se = float(np.average(batch_w3, weights=sizes)), se(batch_w3)
    else:
        w3, w3_se = LOGISTIC_VARIANCE, 0.0

    truth = TruthOracle(
        omega1=float(np.var(np.concatenate(care_levels), ddof=1)),
        omega2=float(np.average(batch_w2, weights=sizes)),
        omega3=w3,
        omega1_se=se(batch_w1),
        omega2_se=se(batch_w2),
        omega3_se=w3_se,
        oracle_draws=oracle_draws,
        batches=batches,
        seed=seed,
    )
    logger.info("Oracle truth: omega=(%.6g, %.6g, %.6g) from %d draws", truth.omega1, truth.omega2, truth.omega3, oracle_draws)
    return truth


# ---------------------------------------------------------------------------
# Study harness
# ---------------------------------------------------------------------------

def _replicate(
    config: SimulationConfig,
    index: int,
    estimators: Sequence[Estimator],
) -> Optional[list[ReplicateRecord]]:
    link = default_link(config.outcome_kind)
    try:
        dataset = generate(config, child_seed(config.seed, Stream.REPLICATES, index))
        assignment = fit_multinomial(dataset, 0)
        ddof = default_ddof(dataset)
        records = []
        for estimator in estimators:
            outcome = fit_outcome(dataset, link, estimator.effects)
            tables = build_tables(outcome, assignment, dataset)
            parts = components_from_tables(tables, dataset, ResidualMode.SUBTRACTION, ddof)
            records.append(ReplicateRecord(
                replicate=index,
                estimator=estimator,
                omega1=parts.omega1,
                omega2=parts.omega2,
                omega3=parts.omega3,
                equal_weight_omega2=equal_weight_omega2(outcome, dataset),
                tau2=outcome.tau2 if isinstance(outcome, MixedFit) else None,
            ))
        return records
    except (VarianceLabError, linalg.LinAlgError) as exc:
        logger.warning("Replicate %d failed: %s", index, exc)
        return None


def summarize(
    records: Sequence[ReplicateRecord],
    estimators: Sequence[Estimator],
    oracle: Optional[TruthOracle] = None,
) -> list[StudyRow]:
    """Sampling-distribution summary per estimator × component."""
    rows = []
    for estimator in estimators:
        chosen = [r for r in records if r.estimator is estimator]
        for component in SUMMARY_COMPONENTS:
            values = np.array([getattr(r, component) for r in chosen if getattr(r, component) is not None])
            if values.size == 0:
                continue
            mean = float(np.mean(values))
            sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
            half = 1.96 * sd / math.sqrt(values.size)
            q025, q975 = np.quantile(values, [0.025, 0.975], method=QUANTILE_METHOD)
            truth = getattr(oracle, component, None) if oracle is not None and component.startswith("omega") else None
            truth_se = getattr(oracle, f"{component}_se") if truth is not None else None
            rows.append(StudyRow(
                estimator=estimator,
                component=component,
                mean=mean,
                sd=sd,
                q025=float(q025),
                q975=float(q975),
                mc_lower=mean - half,
                mc_upper=mean + half,
                truth=truth,
                truth_se=truth_se,
                replications=int(values.size),
            ))
    return rows


def run_study(
    config: SimulationConfig,
    replications: int,
    estimators: Sequence[Estimator] = (Estimator.FE, Estimator.RE),
    oracle_draws: int = DEFAULT_ORACLE_DRAWS,
    threads: Optional[int] = None,
    keep_replicates: bool = False,
) -> StudySummary:
    """
    Replicate generate → fit → decompose and summarize each estimator.

    Each replicate draws from its own seed derived from (config.seed,
    index), so results do not depend on the worker count.

    Raises:
        NumericalError: more than ``MAX_DROPPED_FRACTION`` of the replicates failed.
    """
    if replications < 1:
        raise DataError("replications must be >= 1")
    config = with_hospital_params(config)
    oracle = oracle_truth(config, oracle_draws, child_seed(config.seed, Stream.ORACLE))

    logger.info("Running %d replications (n=%d, m=%d, %s)", replications, config.n, config.m, config.outcome_kind.value)
    outcomes = Parallel(n_jobs=n_jobs(threads), prefer="threads")(
        delayed(_replicate)(config, r, list(estimators)) for r in range(replications)
    )

    failures = sum(1 for o in outcomes if o is None)
    if failures > MAX_DROPPED_FRACTION * replications:
        raise NumericalError(f"{failures} of {replications} replicates failed")
    records = [record for o in outcomes if o is not None for record in o]

    return StudySummary(
        config=config,
        replications=replications,
        failures=failures,
        oracle=oracle,
        rows=summarize(records, estimators, oracle),
        replicates=records if keep_replicates else [],
    )
