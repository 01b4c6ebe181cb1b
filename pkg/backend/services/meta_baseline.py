"""
Meta-analysis Baseline Service — indirectly standardized hospital QIs.

θ̂_z = p·O_z/E_z with E_z the sum of case-mix-only predicted risks over
hospital z's patients, s²_z its null sampling variance, then
DerSimonian–Laird τ² and I² across hospitals. Expected counts are treated
as known.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from scipy import stats

from backend.models.errors import DataError
from backend.models.schemas import HospitalQi, LinkFunction, MetaReport, MetaResult, OutcomeKind
from backend.services.dataset import Dataset
from backend.services.glm import GlmFit, fit_glm

logger = logging.getLogger(__name__)


def indirect_qi(dataset: Dataset, casemix_fit: GlmFit) -> list[HospitalQi]:
    """
    Per-hospital observed and expected counts, θ̂_z and s²_z.

    Hospitals with E_z = 0 (or a zero null variance) are excluded and logged.

    Raises:
        DataError: non-binary outcome, or a fit that includes hospital terms.
    """
    if dataset.outcome_kind is not OutcomeKind.BINARY:
        raise DataError("indirect standardization needs a binary outcome")
    if casemix_fit.includes_hospitals:
        raise DataError("expected counts need a case-mix-only fit (no hospital terms)")

    risk = casemix_fit.mean_table(dataset.covariates)[:, 0]
    p = float(np.mean(dataset.outcome))
    observed = np.bincount(dataset.hospital, weights=dataset.outcome, minlength=dataset.m)
    expected = np.bincount(dataset.hospital, weights=risk, minlength=dataset.m)
    null_var = np.bincount(dataset.hospital, weights=risk * (1.0 - risk), minlength=dataset.m)
    volumes = dataset.volumes

    qis = []
    for z in range(dataset.m):
        label = dataset.hospital_labels[z]
        if expected[z] <= 0.0 or null_var[z] <= 0.0:
            logger.warning("Hospital %s excluded: expected count %.3g", label, expected[z])
            continue
        qis.append(HospitalQi(
            label=label,
            theta=p * observed[z] / expected[z],
            s2=p ** 2 / expected[z] ** 2 * null_var[z],
            observed=float(observed[z]),
            expected=float(expected[z]),
            volume=int(volumes[z]),
        ))
    return qis


def dersimonian_laird(qis: Sequence[HospitalQi]) -> MetaResult:
    """
    Moment estimator of between-hospital heterogeneity.

    θ̄ is the inverse-variance weighted mean.

    Raises:
        DataError: fewer than two hospitals or a non-positive s².
    """
    if len(qis) < 2:
        raise DataError("DerSimonian-Laird needs at least 2 hospitals")
    theta = np.array([q.theta for q in qis])
    s2 = np.array([q.s2 for q in qis])
    if np.any(s2 <= 0.0) or not np.all(np.isfinite(s2)):
        raise DataError("degenerate weights: every s2 must be positive and finite")

    w = 1.0 / s2
    theta_bar = float(np.sum(w * theta) / np.sum(w))
    q = float(np.sum(w * (theta - theta_bar) ** 2))
    df = len(qis) - 1
    c = float(np.sum(w) - np.sum(w ** 2) / np.sum(w))
    tau2 = max(0.0, (q - df) / c) if c > 0.0 else 0.0
    i2 = max(0.0, (q - df) / q) if q > 0.0 else 0.0

    return MetaResult(
        tau2=tau2,
        i2=i2,
        q=q,
        df=df,
        q_pvalue=float(stats.chi2.sf(q, df)),
        theta_bar=theta_bar,
    )


def meta_analysis(dataset: Dataset) -> MetaReport:
    """Case-mix-only logistic fit, indirect QIs and their DerSimonian–Laird summary."""
    casemix = fit_glm(dataset, LinkFunction.LOGIT, include_hospitals=False)
    qis = indirect_qi(dataset, casemix)
    result = dersimonian_laird(qis)
    logger.info("Meta baseline: %d hospitals, tau2=%.6g, I2=%.4f", len(qis), result.tau2, result.i2)
    return MetaReport(hospitals=qis, result=result)
