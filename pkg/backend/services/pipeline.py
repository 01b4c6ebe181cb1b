"""
Pipeline — orchestrates each run from configuration to written outputs.

    CSV → Dataset → fits → tables → components → (draws → intervals) → JSON/CSV

This module is the **only** place where file I/O and numerical services
meet. The CLI and the routers call the pipeline; the pipeline calls
services and utils.
"""

from __future__ import annotations

import logging
import time
from typing import Optional

import pandas as pd

from backend.models.errors import ConfigError
from backend.models.schemas import (
    AssignmentModelConfig,
    DecomposeReport,
    DecomposeRequest,
    DecompositionResult,
    MetaReport,
    MetaRequest,
    MetaRunReport,
    OracleReport,
    OracleRequest,
    OutcomeModelConfig,
    RunConfig,
    SimulateReport,
    SimulationConfig,
    TruthOracle,
)
from backend.services.dataset import Dataset
from backend.services.decomposition import decompose_fitted, fit_models
from backend.services.meta_baseline import meta_analysis
from backend.services.simulation import oracle_truth, run_study, with_hospital_params
from backend.services.uncertainty import PosteriorDraws, posterior_draws, with_intervals
from backend.utils.file_manager import validate_input_path, validate_output_path
from backend.utils.rng import Stream, child_seed
from backend.utils.table_io import (
    dataset_from_frame,
    decomposition_frame,
    draws_frame,
    load_dataset,
    meta_frame,
    replicates_frame,
    study_frame,
    write_frame,
    write_json,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------

def decompose_dataset(
    dataset: Dataset,
    outcome_config: OutcomeModelConfig,
    assignment_config: AssignmentModelConfig,
    draws: int = 0,
    level: float = 0.95,
    seed: int = 0,
    threads: Optional[int] = None,
) -> tuple[DecompositionResult, Optional[PosteriorDraws]]:
    """Point decomposition, plus credible intervals when ``draws > 0``."""
    models = fit_models(dataset, outcome_config, assignment_config)
    result = decompose_fitted(models, dataset)
    if draws <= 0:
        return result, None
    posterior = posterior_draws(models, dataset, draws, seed, threads)
    return with_intervals(result, posterior, level), posterior


def _load(config: RunConfig) -> Dataset:
    if config.input is None:
        raise ConfigError(f"{config.subcommand.value} needs an input CSV")
    return load_dataset(
        validate_input_path(config.input),
        config.outcome_col,
        config.hospital_col,
        config.covariate_cols,
        config.outcome_kind,
    )


def _simulation(config: RunConfig) -> SimulationConfig:
    if config.simulation is None:
        raise ConfigError(f"{config.subcommand.value} needs a simulation configuration")
    return with_hospital_params(config.simulation)


def oracle_seed(simulation: SimulationConfig) -> int:
    """Seed of the Monte Carlo truth for a study; shared by the oracle and simulate runs."""
    return child_seed(simulation.seed, Stream.ORACLE)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def run_decompose(config: RunConfig) -> DecomposeReport:
    """Fit, decompose and write the decomposition report."""
    t0 = time.perf_counter()
    dataset = _load(config)
    result, posterior = decompose_dataset(
        dataset,
        config.outcome_model(),
        config.assignment_model(),
        draws=config.draws if config.intervals else 0,
        level=config.level,
        seed=config.seed,
        threads=config.threads,
    )
    report = DecomposeReport(config=config, result=result)

    if config.output is not None:
        write_json(report, validate_output_path(config.output, ".json"))
    if config.csv_output is not None:
        write_frame(decomposition_frame(result), validate_output_path(config.csv_output, ".csv"), config)
    if config.draws_output is not None and posterior is not None:
        write_frame(draws_frame(posterior), validate_output_path(config.draws_output, ".csv"), config)

    logger.info("Decompose finished in %.2fs", time.perf_counter() - t0)
    return report


def run_simulate(config: RunConfig) -> SimulateReport:
    """Run the replication study and write its summaries."""
    t0 = time.perf_counter()
    simulation = _simulation(config)
    config = config.model_copy(update={"simulation": simulation})
    summary = run_study(
        simulation,
        config.replications,
        config.estimators,
        oracle_draws=config.oracle_draws,
        threads=config.threads,
        keep_replicates=config.replicates_output is not None,
    )
    report = SimulateReport(config=config, summary=summary)

    if config.output is not None:
        write_json(report, validate_output_path(config.output, ".json"))
    if config.csv_output is not None:
        write_frame(study_frame(summary), validate_output_path(config.csv_output, ".csv"), config)
    if config.replicates_output is not None:
        write_frame(replicates_frame(summary.replicates), validate_output_path(config.replicates_output, ".csv"), config)

    logger.info("Simulate finished in %.2fs", time.perf_counter() - t0)
    return report


def run_oracle(config: RunConfig) -> OracleReport:
    """Monte Carlo truth of a simulation configuration."""
    simulation = _simulation(config)
    config = config.model_copy(update={"simulation": simulation})
    truth = oracle_truth(simulation, config.oracle_draws, oracle_seed(simulation))
    report = OracleReport(config=config, truth=truth)
    if config.output is not None:
        write_json(report, validate_output_path(config.output, ".json"))
    return report


def run_meta(config: RunConfig) -> MetaRunReport:
    """Indirect standardization plus DerSimonian–Laird summary."""
    report = MetaRunReport(config=config, report=meta_analysis(_load(config)))
    if config.output is not None:
        write_json(report, validate_output_path(config.output, ".json"))
    if config.csv_output is not None:
        write_frame(meta_frame(report.report), validate_output_path(config.csv_output, ".csv"), config)
    return report


# ---------------------------------------------------------------------------
# In-memory entry points for the HTTP surface
# ---------------------------------------------------------------------------

def decompose_records(request: DecomposeRequest) -> DecompositionResult:
    dataset = dataset_from_frame(
        pd.DataFrame(request.records),
        request.outcome,
        request.hospital,
        request.covariates,
        request.outcome_kind,
    )
    result, _ = decompose_dataset(
        dataset,
        OutcomeModelConfig(link=request.link, effects=request.effects, residual_mode=request.residual_mode),
        AssignmentModelConfig(volume_threshold=request.volume_threshold),
        draws=request.draws,
        level=request.level,
        seed=request.seed,
    )
    return result


def oracle_for(request: OracleRequest) -> TruthOracle:
    simulation = with_hospital_params(request.config)
    return oracle_truth(simulation, request.oracle_draws, oracle_seed(simulation))


def meta_records(request: MetaRequest) -> MetaReport:
    dataset = dataset_from_frame(
        pd.DataFrame(request.records),
        request.outcome,
        request.hospital,
        request.covariates,
    )
    return meta_analysis(dataset)
