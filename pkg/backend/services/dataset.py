"""
Dataset Service — patient-level records and their validation.

A ``Dataset`` is immutable once built by :func:`validate`; every other
service reads it and never copies it back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from backend.config import MIN_PATIENTS
from backend.models.errors import DataError
from backend.models.schemas import OutcomeKind

logger = logging.getLogger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Dataset:
    """
    Validated patient records.

    ``hospital`` holds compact codes 0..m-1; code ``k`` is hospital ``k + 1``
    in the 1-based numbering used by every public API, and
    ``hospital_labels[k]`` is its label in the source file.
    """
    outcome: np.ndarray
    hospital: np.ndarray
    covariates: np.ndarray
    hospital_count: int
    covariate_names: tuple[str, ...]
    hospital_labels: tuple[str, ...]
    outcome_kind: OutcomeKind

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])

    @property
    def m(self) -> int:
        return self.hospital_count

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def volumes(self) -> np.ndarray:
        """Patient count per hospital code."""
        return np.bincount(self.hospital, minlength=self.m)

    def with_outcome(self, outcome: np.ndarray) -> "Dataset":
        """Same hospitals and case-mix, new outcome vector (bootstrap replicates)."""
        outcome = np.asarray(outcome, dtype=float)
        if outcome.shape != self.outcome.shape:
            raise DataError("replacement outcome has the wrong length")
        return replace(self, outcome=_frozen(outcome.copy()))


def _compact_labels(hospital: Sequence) -> tuple[np.ndarray, tuple[str, ...]]:
    """Map arbitrary labels onto 0..m-1 in sorted label order."""
    raw = np.asarray(hospital)
    if raw.dtype.kind in "iu":
        uniques, codes = np.unique(raw, return_inverse=True)
    elif raw.dtype.kind == "f" and np.all(np.isfinite(raw)) and np.all(raw == np.round(raw)):
        uniques, codes = np.unique(raw.astype(np.int64), return_inverse=True)
    else:
        uniques, codes = np.unique(raw.astype(str), return_inverse=True)
    return codes.astype(np.int64).ravel(), tuple(str(u) for u in uniques)


def validate(
    outcome: Sequence[float],
    hospital: Sequence,
    covariates: Optional[np.ndarray] = None,
    covariate_names: Optional[Sequence[str]] = None,
    outcome_kind: Optional[OutcomeKind] = None,
) -> Dataset:
    """
    Build a validated :class:`Dataset` from raw parsed columns.

    Hospital labels are compacted to 1..m in sorted label order. When
    ``outcome_kind`` is ``None`` it is inferred: binary if every outcome
    is 0 or 1, continuous otherwise.

    Raises:
        DataError: ragged columns, n < 2, non-finite values, or a
            non-{0,1} outcome in binary mode.
    """
    y = np.asarray(outcome, dtype=float).ravel()
    n = y.shape[0]

    if covariates is None:
        x = np.empty((n, 0), dtype=float)
    else:
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)

    if len(hospital) != n or x.shape[0] != n:
        raise DataError(
            f"ragged columns: outcome={n}, hospital={len(hospital)}, covariates={x.shape[0]}"
        )
    if n < MIN_PATIENTS:
        raise DataError(f"need at least {MIN_PATIENTS} patients, got {n}")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
        raise DataError("outcome and covariates must be finite (complete cases only)")

    if covariate_names is None:
        names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
    else:
        names = tuple(str(c) for c in covariate_names)
        if len(names) != x.shape[1]:
            raise DataError("one covariate name is needed per covariate column")

    is_binary = bool(np.all((y == 0.0) | (y == 1.0)))
    if outcome_kind is None:
        outcome_kind = OutcomeKind.BINARY if is_binary else OutcomeKind.CONTINUOUS
    elif outcome_kind is OutcomeKind.BINARY and not is_binary:
        raise DataError("outcome not in {0,1}")

    codes, labels = _compact_labels(hospital)
    logger.info("Validated dataset: n=%d, m=%d, p=%d, kind=%s", n, len(labels), x.shape[1], outcome_kind.value)

    return Dataset(
        outcome=_frozen(y.copy()),
        hospital=_frozen(codes),
        covariates=_frozen(np.ascontiguousarray(x)),
        hospital_count=len(labels),
        covariate_names=names,
        hospital_labels=labels,
        outcome_kind=outcome_kind,
    )


def default_ddof(dataset: Dataset) -> int:
    """n-divisor for binary outcomes, (n−1)-divisor for continuous ones."""
    return 0 if dataset.outcome_kind is OutcomeKind.BINARY else 1


def empirical_total_variance(dataset: Dataset, ddof: Optional[int] = None) -> float:
    """
    Sample variance of the outcome.

    ``ddof=0`` reproduces p̂(1−p̂) exactly for a binary outcome; ``None``
    selects :func:`default_ddof`.
    """
    if ddof is None:
        ddof = default_ddof(dataset)
    if ddof not in (0, 1):
        raise ValueError("ddof must be 0 or 1")
    return float(np.var(dataset.outcome, ddof=ddof))
