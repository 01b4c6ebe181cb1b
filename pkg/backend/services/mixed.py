"""
Mixed Model Service — random-intercept outcome models.

Identity link: REML profiled over the variance ratio λ = τ²/σ², with
generalized least squares for (α0, β) and BLUP hospital intercepts.
Logit link: Laplace-approximated marginal likelihood over (α0, β, log τ²),
conditional modes of the hospital intercepts as empirical Bayes values.

The random-intercept covariance has one block per hospital, so every
quadratic form below reduces to per-hospital sums.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize, special

from backend.config import (
    INNER_MODE_MAX_ITER,
    INNER_MODE_MAX_STEP,
    INNER_MODE_TOL,
    LOGISTIC_VARIANCE,
    TAU2_CEILING,
    TAU2_FLOOR,
)
from backend.models.errors import ConvergenceError, DataError, NumericalError
from backend.models.schemas import LinkFunction
from backend.services.dataset import Dataset
from backend.services.glm import (
    check_rank,
    covariate_vector,
    design_matrix,
    fit_glm,
    hospital_index,
    newton_maximize,
)

logger = logging.getLogger(__name__)

GRID_POINTS = 33
FD_STEP = 1e-4


@dataclass(frozen=True)
class MixedFit:
    """Random-intercept outcome model with empirical Bayes hospital intercepts."""
    alpha0: float
    beta: np.ndarray
    tau2: float
    eb_intercepts: np.ndarray
    link: LinkFunction
    sigma2: Optional[float] = None
    converged: bool = True
    iterations: int = 0
    loglik: float = float("nan")
    lr_statistic: float = 0.0
    boundary: bool = False
    tau2_fixed: bool = False
    deviance_trace: tuple[float, ...] = field(default_factory=tuple)

    @property
    def hospital_count(self) -> int:
        return int(self.eb_intercepts.size)

    @property
    def covariate_count(self) -> int:
        return int(self.beta.size)

    @property
    def icc(self) -> Optional[float]:
        """τ²/(τ² + σ²) on the data scale (identity) or the latent scale (logit)."""
        scale = LOGISTIC_VARIANCE if self.link is LinkFunction.LOGIT else self.sigma2
        if scale is None or self.tau2 + scale <= 0.0:
            return None
        return self.tau2 / (self.tau2 + scale)

    def mean_table(self, covariates: np.ndarray) -> np.ndarray:
        """μ_i(z) with α_z replaced by the EB intercepts, shape (n, m)."""
        eta = self.alpha0 + self.eb_intercepts[None, :] + (np.asarray(covariates, float) @ self.beta)[:, None]
        return self.link.inverse(eta)


def predict_mu_mixed(fit: MixedFit, hospital: int, covariates: np.ndarray) -> float:
    """g⁻¹(α0 + α̂_z(EB) + β'x) for hospital *hospital* in 1..m."""
    code = hospital_index(hospital, fit.hospital_count)
    x = covariate_vector(covariates, fit.covariate_count)
    return float(fit.mean_table(x[None, :])[0, code])


def _grid_then_refine(objective: Callable[[float], float], lower: float, upper: float) -> tuple[float, float, int]:
    """Maximize a 1-D function: log-spaced coarse grid, then bounded Brent around the best point."""
    grid = np.linspace(lower, upper, GRID_POINTS)
    values = np.array([objective(v) for v in grid])
    best = int(np.argmax(values))
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, GRID_POINTS - 1)]
    result = optimize.minimize_scalar(
        lambda v: -objective(v), bounds=(lo, hi), method="bounded", options={"xatol": 1e-10},
    )
    if -result.fun >= values[best]:
        return float(result.x), float(-result.fun), GRID_POINTS + int(result.nfev)
    return float(grid[best]), float(values[best]), GRID_POINTS + int(result.nfev)


# ==========================================================================
# Identity link: REML
# ==========================================================================

class _ClusteredDesign:
    """Per-hospital sums needed for H(λ) = I + λZZ' quadratic forms."""

    def __init__(self, dataset: Dataset, design: np.ndarray) -> None:
        self.n, self.width = design.shape
        self.design = design
        self.y = dataset.outcome
        self.hospital = dataset.hospital
        self.m = dataset.m
        self.sizes = dataset.volumes.astype(float)
        self.x_sums = np.stack(
            [np.bincount(dataset.hospital, weights=design[:, j], minlength=self.m) for j in range(self.width)],
            axis=1,
        )
        self.y_sums = np.bincount(dataset.hospital, weights=self.y, minlength=self.m)
        # Within-hospital cross-products; H⁻¹ forms add a between term so nothing cancels
        centered = design - (self.x_sums / self.sizes[:, None])[self.hospital]
        centered_y = self.y - (self.y_sums / self.sizes)[self.hospital]
        self.within_xx = centered.T @ centered
        self.within_xy = centered.T @ centered_y

    def gls(self, ratio: float) -> tuple[np.ndarray, float, float, float]:
        """(β, r'H⁻¹r, log|H|, log|X'H⁻¹X|) at variance ratio *ratio*."""
        between = 1.0 / (self.sizes * (1.0 + self.sizes * ratio))
        xhx = self.within_xx + self.x_sums.T @ (self.x_sums * between[:, None])
        xhy = self.within_xy + self.x_sums.T @ (between * self.y_sums)
        try:
            factor = linalg.cho_factor(xhx, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"GLS normal equations are not positive definite at ratio {ratio:.3g}") from exc
        beta = linalg.cho_solve(factor, xhy, check_finite=False)
        residual = self.y - self.design @ beta
        residual_sums = np.bincount(self.hospital, weights=residual, minlength=self.m)
        within = residual - (residual_sums / self.sizes)[self.hospital]
        quad = float(within @ within + np.sum(between * residual_sums ** 2))
        logdet_h = float(np.sum(np.log1p(self.sizes * ratio)))
        logdet_xhx = float(2.0 * np.sum(np.log(np.abs(np.diag(factor[0])))))
        return beta, max(quad, 0.0), logdet_h, logdet_xhx

    def reml_loglik(self, ratio: float, sigma2: float) -> float:
        beta, quad, logdet_h, logdet_xhx = self.gls(ratio)
        dof = self.n - self.width
        return -0.5 * (
            dof * math.log(2.0 * math.pi)
            + dof * math.log(sigma2)
            + logdet_h
            + logdet_xhx
            + quad / sigma2
        )

    def profiled(self, ratio: float) -> tuple[float, float]:
        """REML log-likelihood with σ² profiled out, and that σ̂²."""
        _, quad, _, _ = self.gls(ratio)
        sigma2 = quad / (self.n - self.width)
        if sigma2 <= 0.0:
            return float("-inf"), 0.0
        return self.reml_loglik(ratio, sigma2), sigma2

    def blups(self, ratio: float, beta: np.ndarray) -> np.ndarray:
        residual_sums = np.bincount(self.hospital, weights=self.y - self.design @ beta, minlength=self.m)
        return ratio * residual_sums / (1.0 + self.sizes * ratio)


def _fit_reml(dataset: Dataset, tau2: Optional[float]) -> MixedFit:
    design, names = design_matrix(dataset, include_hospitals=False)
    check_rank(design, names)
    if dataset.n <= design.shape[1]:
        raise DataError("REML needs more patients than fixed-effect columns")
    clusters = _ClusteredDesign(dataset, design)
    scale = float(np.var(dataset.outcome))
    if scale <= 0.0:
        raise DataError("outcome is constant; variance components are not identified")

    null_loglik, null_sigma2 = clusters.profiled(0.0)

    if tau2 is None:
        log_ratio, best, evaluations = _grid_then_refine(
            lambda v: clusters.profiled(math.exp(v))[0],
            math.log(TAU2_FLOOR), math.log(TAU2_CEILING),
        )
        ratio = math.exp(log_ratio)
        _, sigma2 = clusters.profiled(ratio)
        if null_loglik >= best or ratio * sigma2 < TAU2_FLOOR:
            ratio, sigma2, best = 0.0, null_sigma2, null_loglik
        tau2_hat = ratio * sigma2
    else:
        tau2_hat = float(tau2)

        def fixed(log_sigma2: float) -> float:
            sigma2 = math.exp(log_sigma2)
            return clusters.reml_loglik(tau2_hat / sigma2, sigma2)

        # keep τ²/σ² within the ratio ceiling
        lower = max(scale * 1e-12, tau2_hat / TAU2_CEILING)
        upper = max(scale * 10.0, lower * 10.0)
        log_sigma2, best, evaluations = _grid_then_refine(fixed, math.log(lower), math.log(upper))
        sigma2 = math.exp(log_sigma2)
        ratio = tau2_hat / sigma2

    beta, _, _, _ = clusters.gls(ratio)
    boundary = tau2_hat < TAU2_FLOOR
    if boundary:
        tau2_hat = 0.0
    logger.info("Fitted REML random intercept: tau2=%.6g, sigma2=%.6g, boundary=%s", tau2_hat, sigma2, boundary)

    return MixedFit(
        alpha0=float(beta[0]),
        beta=beta[1:].copy(),
        tau2=tau2_hat,
        sigma2=sigma2,
        eb_intercepts=clusters.blups(ratio, beta),
        link=LinkFunction.IDENTITY,
        iterations=evaluations,
        loglik=best,
        lr_statistic=max(2.0 * (best - null_loglik), 0.0),
        boundary=boundary,
        tau2_fixed=tau2 is not None,
    )


# ==========================================================================
# Logit link: Laplace approximation
# ==========================================================================

def conditional_modes(
    offset: np.ndarray,
    outcome: np.ndarray,
    hospital: np.ndarray,
    m: int,
    tau2: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-hospital modes of the intercept posterior under N(0, τ²).

    All hospitals are solved together by a clipped Newton iteration.

    Returns:
        ``(modes, weights)`` where ``weights[z]`` is Σ μ(1−μ) over hospital z at the mode.
    """
    modes = np.zeros(m)
    precision = 1.0 / tau2
    for _ in range(INNER_MODE_MAX_ITER):
        mu = special.expit(offset + modes[hospital])
        gradient = np.bincount(hospital, weights=outcome - mu, minlength=m) - modes * precision
        weights = np.bincount(hospital, weights=mu * (1.0 - mu), minlength=m)
        step = np.clip(gradient / (weights + precision), -INNER_MODE_MAX_STEP, INNER_MODE_MAX_STEP)
        modes = modes + step
        if np.max(np.abs(step) / (1.0 + np.abs(modes))) < INNER_MODE_TOL:
            break
    else:
        raise ConvergenceError("conditional-mode Newton", INNER_MODE_MAX_ITER)
    mu = special.expit(offset + modes[hospital])
    return modes, np.bincount(hospital, weights=mu * (1.0 - mu), minlength=m)


def _positive_definite(matrix: np.ndarray) -> np.ndarray:
    """Symmetrize and lift eigenvalues to a small positive floor."""
    values, vectors = linalg.eigh(0.5 * (matrix + matrix.T))
    floor = max(1e-8 * float(np.max(np.abs(values), initial=0.0)), 1e-12)
    if np.any(values < floor):
        logger.debug("Outer Hessian not positive definite; ridging %d eigenvalue(s)", int(np.sum(values < floor)))
    values = np.maximum(values, floor)
    return (vectors * values) @ vectors.T


def _finite_differences(func: Callable[[np.ndarray], float], x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, central-difference gradient and Hessian."""
    d = x.size
    f0 = func(x)
    steps = FD_STEP * (1.0 + np.abs(x))
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    plus = np.zeros(d)
    minus = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = steps[i]
        plus[i], minus[i] = func(x + e), func(x - e)
        grad[i] = (plus[i] - minus[i]) / (2.0 * steps[i])
        hess[i, i] = (plus[i] - 2.0 * f0 + minus[i]) / steps[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i], ej[j] = steps[i], steps[j]
            value = (
                func(x + ei + ej) - func(x + ei - ej) - func(x - ei + ej) + func(x - ei - ej)
            ) / (4.0 * steps[i] * steps[j])
            hess[i, j] = hess[j, i] = value
    return f0, grad, hess


def _fit_laplace(dataset: Dataset, tau2: Optional[float]) -> MixedFit:
    y = dataset.outcome
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("logit link requires a binary outcome in {0,1}")
    design, names = design_matrix(dataset, include_hospitals=False)
    check_rank(design, names)
    hospital, m = dataset.hospital, dataset.m
    width = design.shape[1]

    casemix = fit_glm(dataset, LinkFunction.LOGIT, include_hospitals=False)

    def laplace(coefficients: np.ndarray, variance: float) -> float:
        offset = design @ coefficients
        modes, weights = conditional_modes(offset, y, hospital, m, variance)
        eta = offset + modes[hospital]
        return float(
            np.sum(y * eta - np.logaddexp(0.0, eta))
            - np.sum(modes ** 2) / (2.0 * variance)
            - 0.5 * np.sum(np.log1p(variance * weights))
        )

    def boundary_fit(fixed: bool) -> MixedFit:
        logger.info("Laplace random intercept at the tau2 = 0 boundary")
        return MixedFit(
            alpha0=float(casemix.coefficients[0]),
            beta=casemix.coefficients[1:].copy(),
            tau2=0.0,
            eb_intercepts=np.zeros(m),
            link=LinkFunction.LOGIT,
            iterations=casemix.iterations,
            loglik=casemix.loglik,
            lr_statistic=0.0,
            boundary=True,
            tau2_fixed=fixed,
            deviance_trace=(-2.0 * casemix.loglik,),
        )

    if tau2 is not None and tau2 < TAU2_FLOOR:
        return boundary_fit(True)

    def clip_log(value: float) -> float:
        return min(max(value, math.log(TAU2_FLOOR)), math.log(TAU2_CEILING))

    if tau2 is None:
        log_start, _, _ = _grid_then_refine(
            lambda v: laplace(casemix.coefficients, math.exp(v)), math.log(1e-4), math.log(1e2),
        )
        start = np.concatenate([casemix.coefficients, [log_start]])

        def value(psi: np.ndarray) -> float:
            return laplace(psi[:width], math.exp(clip_log(psi[-1])))
    else:
        start = casemix.coefficients.copy()

        def value(psi: np.ndarray) -> float:
            return laplace(psi, float(tau2))

    def objective(psi: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        f0, grad, hess = _finite_differences(value, psi)
        return f0, grad, _positive_definite(-hess)

    trace: list[float] = []
    psi, loglik, iterations = newton_maximize(objective, start, "Laplace outer Newton", trace=trace)

    if tau2 is None:
        tau2_hat = math.exp(clip_log(psi[-1]))
        if tau2_hat <= TAU2_FLOOR or casemix.loglik >= loglik:
            return boundary_fit(False)
    else:
        tau2_hat = float(tau2)

    coefficients = psi[:width]
    modes, _ = conditional_modes(design @ coefficients, y, hospital, m, tau2_hat)
    logger.info("Fitted Laplace random intercept: tau2=%.6g, iterations=%d, loglik=%.6f", tau2_hat, iterations, loglik)

    return MixedFit(
        alpha0=float(coefficients[0]),
        beta=coefficients[1:].copy(),
        tau2=tau2_hat,
        eb_intercepts=modes,
        link=LinkFunction.LOGIT,
        iterations=iterations,
        loglik=loglik,
        lr_statistic=max(2.0 * (loglik - casemix.loglik), 0.0),
        tau2_fixed=tau2 is not None,
        deviance_trace=tuple(-2.0 * v for v in trace),
    )


def fit_random_intercept(
    dataset: Dataset,
    link: LinkFunction,
    tau2: Optional[float] = None,
) -> MixedFit:
    """
    Random-intercept outcome model α_z ~ N(0, τ²).

    With ``tau2`` given, τ² is held fixed and only the remaining
    parameters are estimated. A τ² estimate at the lower boundary is
    returned as exactly 0 with all EB intercepts 0.

    Raises:
        DataError: m < 2, rank-deficient case-mix design, or a non-binary
            outcome with the logit link.
        ConvergenceError: inner or outer solver failure.
    """
    if dataset.m < 2:
        raise DataError("random-intercept model needs at least 2 hospitals")
    if tau2 is not None and tau2 < 0.0:
        raise DataError("fixed tau2 must be >= 0")
    match link:
        case LinkFunction.IDENTITY:
            return _fit_reml(dataset, tau2)
        case LinkFunction.LOGIT:
            return _fit_laplace(dataset, tau2)
