"""
GLM Service — maximum-likelihood fixed-effect fitters.

Linear and logistic outcome models with hospital indicator terms, and the
multinomial-logistic hospital assignment model. Fits are pure functions
of a :class:`~backend.services.dataset.Dataset` and return frozen objects.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import linalg, special

from backend.config import (
    GRADIENT_TOL,
    MAX_ITERATIONS,
    MAX_STEP_HALVINGS,
    RANK_TOL,
    REL_LOGLIK_TOL,
    SEPARATION_NORM,
    SEPARATION_PROB,
)
from backend.models.errors import ConvergenceError, DataError, RankDeficiencyError
from backend.models.schemas import LinkFunction
from backend.services.dataset import Dataset

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]]


# ==========================================================================
# Shared numerics
# ==========================================================================

def _solve_information(info: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``info @ x = rhs`` for a symmetric information matrix."""
    try:
        factor = linalg.cho_factor(info, check_finite=False)
        return linalg.cho_solve(factor, rhs, check_finite=False)
    except linalg.LinAlgError:
        solution, *_ = np.linalg.lstsq(info, rhs, rcond=None)
        return solution


def newton_maximize(
    objective: Objective,
    start: np.ndarray,
    solver: str,
    trace: Optional[list[float]] = None,
) -> tuple[np.ndarray, float, int]:
    """
    Damped Newton ascent with step-halving.

    *objective* returns ``(loglik, gradient, information)`` where the
    information matrix is the negative Hessian. Converged when the
    relative log-likelihood change drops below ``REL_LOGLIK_TOL`` (one
    extra polishing step is then taken) or the gradient sup-norm drops
    below ``GRADIENT_TOL``. Accepted log-likelihoods are appended to
    *trace* when given.

    Returns:
        ``(params, loglik, iterations)``

    Raises:
        ConvergenceError: after ``MAX_ITERATIONS`` iterations.
    """
    params = np.asarray(start, dtype=float).copy()
    ll, grad, info = objective(params)
    polishing = False
    if trace is not None:
        trace.append(ll)

    for iteration in range(1, MAX_ITERATIONS + 1):
        if grad.size == 0 or np.max(np.abs(grad)) < GRADIENT_TOL:
            return params, ll, iteration - 1

        step = _solve_information(info, grad)
        scale = 1.0
        for _ in range(MAX_STEP_HALVINGS):
            candidate = params + scale * step
            ll_new, grad_new, info_new = objective(candidate)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            scale *= 0.5
        else:
            logger.debug("%s: no ascent after %d halvings; at numerical optimum", solver, MAX_STEP_HALVINGS)
            return params, ll, iteration

        change = abs(ll_new - ll) / (abs(ll_new) + 0.1)
        params, ll, grad, info = candidate, ll_new, grad_new, info_new
        if trace is not None:
            trace.append(ll)
        logger.debug("%s iter %d: loglik=%.12g, step=%.3g", solver, iteration, ll, scale)

        if polishing:
            return params, ll, iteration
        if change < REL_LOGLIK_TOL:
            polishing = True

    raise ConvergenceError(solver, MAX_ITERATIONS)


def check_rank(design: np.ndarray, names: list[str]) -> None:
    """Raise on the first column that is (numerically) a combination of earlier ones."""
    n, q = design.shape
    if n < q:
        raise RankDeficiencyError(names[n])
    r = linalg.qr(design, mode="r", check_finite=False)[0]
    norms = np.linalg.norm(design, axis=0)
    for j in range(q):
        if norms[j] == 0.0 or abs(r[j, j]) <= RANK_TOL * max(norms[j], 1.0) * math.sqrt(n):
            raise RankDeficiencyError(names[j])


def design_matrix(dataset: Dataset, include_hospitals: bool = True) -> tuple[np.ndarray, list[str]]:
    """
    Outcome design: intercept, hospital indicators for hospitals 2..m, covariates.

    Returns:
        ``(design, column_names)``
    """
    columns = [np.ones(dataset.n)]
    names = ["intercept"]
    if include_hospitals:
        for code in range(1, dataset.m):
            columns.append((dataset.hospital == code).astype(float))
            names.append(f"hospital[{dataset.hospital_labels[code]}]")
    for j, name in enumerate(dataset.covariate_names):
        columns.append(dataset.covariates[:, j])
        names.append(name)
    return np.column_stack(columns), names


def _require_binary(dataset: Dataset) -> None:
    y = dataset.outcome
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("logit link requires a binary outcome in {0,1}")


# ==========================================================================
# Outcome model
# ==========================================================================

@dataclass(frozen=True)
class GlmFit:
    """
    Fixed-effect outcome model g(μ) = α0 + α_z + β'x with α_1 = 0.

    ``coefficients`` is laid out as (α0, α_2..α_m, β); without hospital
    terms it is (α0, β).
    """
    coefficients: np.ndarray
    link: LinkFunction
    hospital_count: int
    covariate_count: int
    includes_hospitals: bool = True
    covariance: Optional[np.ndarray] = None
    sigma2: Optional[float] = None
    converged: bool = True
    iterations: int = 0
    separated: bool = False
    loglik: float = float("nan")
    column_names: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def from_parameters(
        cls,
        alpha0: float,
        alpha: np.ndarray,
        beta: np.ndarray,
        link: LinkFunction,
        sigma2: Optional[float] = None,
    ) -> "GlmFit":
        """Build a fit from known parameters; ``alpha`` has one entry per hospital with alpha[0] = 0."""
        alpha = np.asarray(alpha, dtype=float).ravel()
        beta = np.asarray(beta, dtype=float).ravel()
        if alpha.size == 0 or alpha[0] != 0.0:
            raise ValueError("alpha must list every hospital with alpha[0] == 0")
        coefficients = np.concatenate([[float(alpha0)], alpha[1:], beta])
        return cls(
            coefficients=coefficients,
            link=link,
            hospital_count=alpha.size,
            covariate_count=beta.size,
            sigma2=sigma2,
        )

    @property
    def alpha0(self) -> float:
        return float(self.coefficients[0])

    @property
    def alpha(self) -> np.ndarray:
        """Hospital offsets α_1..α_m (α_1 = 0)."""
        if not self.includes_hospitals:
            return np.zeros(self.hospital_count)
        return np.concatenate([[0.0], self.coefficients[1:self.hospital_count]])

    @property
    def beta(self) -> np.ndarray:
        return self.coefficients[self.coefficients.size - self.covariate_count:]

    def mean_table(self, covariates: np.ndarray) -> np.ndarray:
        """μ_i(z) for every row of *covariates* and every hospital, shape (n, m)."""
        eta = self.alpha0 + self.alpha[None, :] + (np.asarray(covariates, float) @ self.beta)[:, None]
        return self.link.inverse(eta)


def fit_glm(dataset: Dataset, link: LinkFunction, include_hospitals: bool = True) -> GlmFit:
    """
    Maximum-likelihood fixed-effect outcome model.

    Identity link: ordinary least squares with σ̂² = RSS/(n − q) and
    covariance σ̂²(X'X)⁻¹. Logit link: IRLS (Newton) with step-halving,
    covariance = inverse observed information.

    Raises:
        RankDeficiencyError: a design column is collinear with earlier ones.
        DataError: logit link with a non-binary outcome.
        ConvergenceError: no convergence within ``MAX_ITERATIONS``.
    """
    design, names = design_matrix(dataset, include_hospitals)
    check_rank(design, names)
    n, q = design.shape
    y = dataset.outcome
    common = dict(
        link=link,
        hospital_count=dataset.m,
        covariate_count=dataset.p,
        includes_hospitals=include_hospitals,
        column_names=tuple(names),
    )

    if link is LinkFunction.IDENTITY:
        if n <= q:
            raise DataError(f"identity fit needs n > q (n={n}, q={q})")
        coefficients, *_ = np.linalg.lstsq(design, y, rcond=None)
        residuals = y - design @ coefficients
        rss = float(residuals @ residuals)
        sigma2 = rss / (n - q)
        covariance = sigma2 * linalg.pinvh(design.T @ design)
        loglik = -0.5 * n * (math.log(2.0 * math.pi * rss / n) + 1.0) if rss > 0 else float("inf")
        logger.info("Fitted OLS: q=%d, sigma2=%.6g", q, sigma2)
        return GlmFit(
            coefficients=coefficients,
            covariance=covariance,
            sigma2=sigma2,
            iterations=1,
            loglik=loglik,
            **common,
        )

    _require_binary(dataset)

    def objective(beta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        eta = design @ beta
        mu = special.expit(eta)
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        weights = mu * (1.0 - mu)
        return ll, design.T @ (y - mu), design.T @ (design * weights[:, None])

    start = np.zeros(q)
    p_hat = float(np.clip(y.mean(), 1e-6, 1.0 - 1e-6))
    start[0] = math.log(p_hat / (1.0 - p_hat))

    coefficients, loglik, iterations = newton_maximize(objective, start, "IRLS")
    _, _, info = objective(coefficients)
    covariance = linalg.pinvh(info)

    mu = special.expit(design @ coefficients)
    separated = bool(
        np.linalg.norm(coefficients) > SEPARATION_NORM
        or np.any(np.minimum(mu, 1.0 - mu) < SEPARATION_PROB)
    )
    if separated:
        logger.warning("Logistic fit shows separation (|coef|=%.3g); returned flagged", np.linalg.norm(coefficients))
    logger.info("Fitted logistic GLM: q=%d, iterations=%d, loglik=%.6f", q, iterations, loglik)

    return GlmFit(
        coefficients=coefficients,
        covariance=covariance,
        iterations=iterations,
        separated=separated,
        loglik=loglik,
        **common,
    )


def hospital_index(hospital: int, m: int) -> int:
    if not 1 <= int(hospital) <= m:
        raise DataError(f"unknown hospital {hospital}; expected 1..{m}")
    return int(hospital) - 1


def covariate_vector(covariates: np.ndarray, p: int) -> np.ndarray:
    x = np.asarray(covariates, dtype=float).ravel()
    if x.size != p:
        raise DataError(f"expected {p} covariates, got {x.size}")
    return x


def predict_mu(fit: GlmFit, hospital: int, covariates: np.ndarray) -> float:
    """g⁻¹(α0 + α_z + β'x) for hospital *hospital* in 1..m."""
    code = hospital_index(hospital, fit.hospital_count)
    x = covariate_vector(covariates, fit.covariate_count)
    return float(fit.mean_table(x[None, :])[0, code])


# ==========================================================================
# Assignment model
# ==========================================================================

@dataclass(frozen=True)
class AssignmentFit:
    """
    Multinomial-logistic assignment model, hospital 1 as reference.

    Row ``k`` of ``gammas``/``phis`` belongs to hospital ``k + 2``.
    Intercept-only hospitals have their slope row pinned at zero and
    absent from the free parameter vector η.
    """
    gammas: np.ndarray
    phis: np.ndarray
    intercept_only: np.ndarray
    eta_covariance: np.ndarray
    volume_threshold: int
    converged: bool = True
    iterations: int = 0
    separated: bool = False
    loglik: float = float("nan")

    @property
    def hospital_count(self) -> int:
        return int(self.gammas.size) + 1

    @property
    def covariate_count(self) -> int:
        return int(self.phis.shape[1])

    @property
    def free_mask(self) -> np.ndarray:
        """(m−1, p+1) mask of free entries in the [γ | φ] coefficient matrix."""
        mask = np.ones((self.hospital_count - 1, self.covariate_count + 1), dtype=bool)
        mask[self.intercept_only[1:], 1:] = False
        return mask

    @property
    def coefficient_matrix(self) -> np.ndarray:
        return np.column_stack([self.gammas, self.phis])

    @property
    def eta(self) -> np.ndarray:
        """Free parameter vector η, hospital-major."""
        return self.coefficient_matrix[self.free_mask]

    def with_eta(self, eta: np.ndarray) -> "AssignmentFit":
        """Copy with the free parameters replaced; pinned slopes stay exactly 0."""
        matrix = np.zeros_like(self.coefficient_matrix)
        matrix[self.free_mask] = np.asarray(eta, dtype=float)
        return replace(self, gammas=matrix[:, 0].copy(), phis=matrix[:, 1:].copy())

    def probability_table(self, covariates: np.ndarray) -> np.ndarray:
        """P(Z = z | x_i) for every row, shape (n, m); rows sum to 1."""
        x = np.asarray(covariates, dtype=float)
        logits = self.gammas[None, :] + x @ self.phis.T
        full = np.column_stack([np.zeros(x.shape[0]), logits])
        return special.softmax(full, axis=1)


def fit_multinomial(dataset: Dataset, volume_threshold: int) -> AssignmentFit:
    """
    Multinomial-logistic assignment model by Newton's method.

    Hospitals treating fewer than *volume_threshold* patients get
    intercept-only terms. ``eta_covariance`` is the inverse observed
    information over the free parameters.

    Raises:
        DataError: fewer than two hospitals or a negative threshold.
        ConvergenceError: no convergence within ``MAX_ITERATIONS``.
    """
    m, p, n = dataset.m, dataset.p, dataset.n
    if m < 2:
        raise DataError("assignment model needs at least 2 hospitals")
    if volume_threshold < 0:
        raise DataError("volume_threshold must be >= 0")

    volumes = dataset.volumes
    intercept_only = volumes < volume_threshold
    slope_hospitals = int(np.sum(~intercept_only[1:]))
    if p > 0 and slope_hospitals < 2:
        logger.warning(
            "Volume threshold %d leaves %d hospital(s) with covariate terms; "
            "assignment model is nearly intercept-only", volume_threshold, slope_hospitals,
        )

    k, width = m - 1, p + 1
    x1 = np.column_stack([np.ones(n), dataset.covariates])
    mask = np.ones((k, width), dtype=bool)
    mask[intercept_only[1:], 1:] = False
    flat = mask.ravel()
    onehot = np.zeros((n, m))
    onehot[np.arange(n), dataset.hospital] = 1.0

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        matrix = np.zeros((k, width))
        matrix[mask] = theta
        logits = np.column_stack([np.zeros(n), x1 @ matrix.T])
        lse = special.logsumexp(logits, axis=1)
        ll = float(np.sum(logits[np.arange(n), dataset.hospital] - lse))
        probs = np.exp(logits[:, 1:] - lse[:, None])
        grad = ((onehot[:, 1:] - probs).T @ x1).ravel()
        blocks = np.einsum("nk,na,nb->kab", probs, x1, x1)
        cross = (probs[:, :, None] * x1[:, None, :]).reshape(n, k * width)
        info = linalg.block_diag(*blocks) - cross.T @ cross
        return ll, grad[flat], info[np.ix_(flat, flat)]

    start = np.zeros((k, width))
    start[:, 0] = np.log(volumes[1:] / volumes[0])
    theta, loglik, iterations = newton_maximize(objective, start[mask], "multinomial Newton")
    _, _, info = objective(theta)

    matrix = np.zeros((k, width))
    matrix[mask] = theta
    separated = bool(np.linalg.norm(theta) > SEPARATION_NORM)
    if separated:
        logger.warning("Assignment model shows separation (|eta|=%.3g); returned flagged", np.linalg.norm(theta))
    logger.info(
        "Fitted multinomial: m=%d, free=%d, intercept-only=%d, iterations=%d",
        m, theta.size, int(intercept_only[1:].sum()), iterations,
    )

    return AssignmentFit(
        gammas=matrix[:, 0].copy(),
        phis=matrix[:, 1:].copy(),
        intercept_only=intercept_only,
        eta_covariance=linalg.pinvh(info),
        volume_threshold=volume_threshold,
        iterations=iterations,
        separated=separated,
        loglik=loglik,
    )


def predict_assignment(fit: AssignmentFit, covariates: np.ndarray) -> np.ndarray:
    """Probability vector over hospitals 1..m for one covariate row."""
    x = covariate_vector(covariates, fit.covariate_count)
    return fit.probability_table(x[None, :])[0]
