"""
Table I/O — CSV ingestion into a Dataset and deterministic JSON/CSV output.

Services work on numpy arrays only; this module is the bridge between
patient-level CSV files and the internal representation.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from backend.models.errors import ConfigError, DataError, OutputError
from backend.models.schemas import DecompositionResult, MetaReport, OutcomeKind, ReplicateRecord, StudySummary
from backend.services.dataset import Dataset, validate
from backend.services.uncertainty import COMPONENTS, PosteriorDraws

logger = logging.getLogger(__name__)

CONFIG_PREFIX = "# config="
FLOAT_FORMAT = "%.17g"


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def read_csv(path: Path) -> pd.DataFrame:
    """
    Read a header-first CSV file.

    Raises:
        ConfigError: the file does not exist.
        DataError: the file cannot be parsed.
    """
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path.name}: {exc}") from exc
    logger.info("Read %s: %d rows, %d columns", path.name, len(frame), len(frame.columns))
    return frame


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    try:
        values = pd.to_numeric(frame[column], errors="raise")
    except (ValueError, TypeError) as exc:
        raise DataError(f"column '{column}' is not numeric") from exc
    return values.to_numpy(dtype=float)


def dataset_from_frame(
    frame: pd.DataFrame,
    outcome_col: str = "outcome",
    hospital_col: str = "hospital",
    covariate_cols: Optional[Sequence[str]] = None,
    outcome_kind: Optional[OutcomeKind] = None,
) -> Dataset:
    """
    Build a :class:`Dataset` from designated columns.

    Without ``covariate_cols`` every remaining column is a covariate.

    Raises:
        ConfigError: a designated column is missing.
        DataError: missing cells or non-numeric outcome/covariates.
    """
    if covariate_cols is None:
        covariate_cols = [c for c in frame.columns if c not in (outcome_col, hospital_col)]
    wanted = [outcome_col, hospital_col, *covariate_cols]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise ConfigError(f"missing column(s): {', '.join(map(str, missing))}")

    incomplete = [c for c in wanted if frame[c].isna().any()]
    if incomplete:
        raise DataError(f"missing values in column(s): {', '.join(map(str, incomplete))}")

    covariates = np.column_stack([_numeric(frame, c) for c in covariate_cols]) if covariate_cols else None
    return validate(
        outcome=_numeric(frame, outcome_col),
        hospital=frame[hospital_col].to_numpy(),
        covariates=covariates,
        covariate_names=[str(c) for c in covariate_cols],
        outcome_kind=outcome_kind,
    )


def load_dataset(
    path: Path,
    outcome_col: str = "outcome",
    hospital_col: str = "hospital",
    covariate_cols: Optional[Sequence[str]] = None,
    outcome_kind: Optional[OutcomeKind] = None,
) -> Dataset:
    """Read *path* and build the validated dataset."""
    return dataset_from_frame(read_csv(path), outcome_col, hospital_col, covariate_cols, outcome_kind)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def write_json(report: BaseModel, path: Path) -> Path:
    """Serialize *report* with a stable layout."""
    try:
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    logger.debug("Wrote %s", path)
    return path


def write_frame(frame: pd.DataFrame, path: Path, config: Optional[BaseModel] = None) -> Path:
    """
    Write a CSV table; the resolved config is embedded as a leading
    comment line so the file alone is enough to rerun.
    """
    try:
        with path.open("w", encoding="utf-8", newline="") as handle:
            if config is not None:
                handle.write(CONFIG_PREFIX + config.model_dump_json() + "\n")
            frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    logger.debug("Wrote %s (%d rows)", path, len(frame))
    return path


def decomposition_frame(result: DecompositionResult) -> pd.DataFrame:
    """One row per component with its proportion and interval."""
    rows = []
    for j, name in enumerate(COMPONENTS):
        interval = result.intervals.bounds.get(name) if result.intervals else None
        rows.append({
            "component": name,
            "estimate": getattr(result, name),
            "proportion": result.proportions[j] if result.proportions else None,
            "lower": interval.lower if interval else None,
            "upper": interval.upper if interval else None,
        })
    rows.append({"component": "total", "estimate": result.total, "proportion": 1.0 if result.proportions else None})
    return pd.DataFrame(rows, columns=["component", "estimate", "proportion", "lower", "upper"])


def draws_frame(draws: PosteriorDraws) -> pd.DataFrame:
    frame = pd.DataFrame(draws.component_draws, columns=list(COMPONENTS))
    frame.insert(0, "draw", np.arange(draws.count))
    return frame


def study_frame(summary: StudySummary) -> pd.DataFrame:
    """One row per estimator × component."""
    return pd.DataFrame([row.model_dump(mode="json") for row in summary.rows])


def replicates_frame(records: Sequence[ReplicateRecord]) -> pd.DataFrame:
    return pd.DataFrame([record.model_dump(mode="json") for record in records])


def meta_frame(report: MetaReport) -> pd.DataFrame:
    """
    Per-hospital QIs followed by one ``summary`` row carrying the
    DerSimonian–Laird result (τ², I², Q, df, p-value, pooled θ).
    """
    hospitals = pd.DataFrame([qi.model_dump() for qi in report.hospitals])
    hospitals.insert(0, "row", "hospital")
    pooled = report.result
    summary = pd.DataFrame([{
        "row": "summary",
        "theta": pooled.theta_bar,
        "tau2": pooled.tau2,
        "i2": pooled.i2,
        "q": pooled.q,
        "df": pooled.df,
        "q_pvalue": pooled.q_pvalue,
    }])
    frame = pd.concat([hospitals, summary], ignore_index=True)
    frame["volume"] = frame["volume"].astype("Int64")
    frame["df"] = frame["df"].astype("Int64")
    return frame
