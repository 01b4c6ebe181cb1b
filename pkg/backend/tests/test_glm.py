"""
Unit Tests for the fixed-effect outcome fits and the assignment model.

Run with:  python -m pytest backend/tests/test_glm.py -v
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import optimize, special

from backend.models.errors import DataError, RankDeficiencyError
from backend.models.schemas import LinkFunction
from backend.services.dataset import Dataset, validate
from backend.services.glm import (
    AssignmentFit,
    GlmFit,
    design_matrix,
    fit_glm,
    fit_multinomial,
    predict_assignment,
    predict_mu,
)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _logistic_dataset(n: int = 400, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.normal(size=n), rng.random(n) < 0.5]).astype(float)
    hospital = rng.integers(1, 4, size=n)
    eta = -0.3 + np.array([0.0, 0.8, -0.6])[hospital - 1] + x @ np.array([0.7, -0.5])
    y = (rng.random(n) < special.expit(eta)).astype(float)
    return validate(y, hospital, x)


def _assignment_dataset(n: int = 600, m: int = 3, seed: int = 1) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    logits = np.column_stack([np.zeros(n), 0.3 + x @ np.array([0.8, -0.4]), -0.2 + x @ np.array([-0.5, 0.6])])
    probs = special.softmax(logits[:, :m], axis=1)
    hospital = np.array([rng.choice(m, p=row) for row in probs]) + 1
    return validate(rng.normal(size=n), hospital, x)


def _zero_assignment(m: int, p: int) -> AssignmentFit:
    return AssignmentFit(
        gammas=np.zeros(m - 1),
        phis=np.zeros((m - 1, p)),
        intercept_only=np.zeros(m, dtype=bool),
        eta_covariance=np.eye((m - 1) * (p + 1)),
        volume_threshold=0,
    )


def _with_slopes(fit: AssignmentFit, phis: list[list[float]]) -> AssignmentFit:
    matrix = np.column_stack([fit.gammas, np.asarray(phis, dtype=float)])
    return fit.with_eta(matrix[fit.free_mask])


# ---------------------------------------------------------------------------
# Tests: fit_glm
# ---------------------------------------------------------------------------

class TestFitGlm:
    def test_intercept_only_logistic(self) -> None:
        ds = validate([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], np.ones(10, dtype=int))
        fit = fit_glm(ds, LinkFunction.LOGIT)
        assert fit.alpha0 == pytest.approx(math.log(0.3 / 0.7), abs=1e-8)
        assert round(fit.alpha0, 4) == -0.8473

    def test_identity_interpolates_noise_free_line(self) -> None:
        x = np.arange(6, dtype=float)
        ds = validate(1.0 + 2.0 * x, np.ones(6, dtype=int), x)
        fit = fit_glm(ds, LinkFunction.IDENTITY)
        np.testing.assert_allclose(fit.coefficients, [1.0, 2.0], atol=1e-10)
        assert fit.sigma2 < 1e-20

    def test_identity_matches_normal_equations(self) -> None:
        x = np.array([0.5, 1.2, 2.0, 3.1, 4.2])
        y = np.array([1.1, 2.3, 2.2, 4.0, 4.9])
        ds = validate(y, [1, 1, 2, 2, 2], x)
        fit = fit_glm(ds, LinkFunction.IDENTITY)

        design = np.column_stack([np.ones(5), [0, 0, 1, 1, 1], x])
        expected = np.linalg.solve(design.T @ design, design.T @ y)
        np.testing.assert_allclose(fit.coefficients, expected, atol=1e-10)
        rss = float(np.sum((y - design @ expected) ** 2))
        assert fit.sigma2 == pytest.approx(rss / 2.0, rel=1e-10)
        np.testing.assert_allclose(fit.covariance, fit.sigma2 * np.linalg.inv(design.T @ design), rtol=1e-8)

    def test_coefficient_layout(self) -> None:
        ds = _logistic_dataset()
        _, names = design_matrix(ds)
        assert names == ["intercept", "hospital[2]", "hospital[3]", "x1", "x2"]
        fit = fit_glm(ds, LinkFunction.LOGIT)
        assert fit.alpha[0] == 0.0
        assert fit.alpha.shape == (3,)
        assert fit.beta.shape == (2,)

    def test_logistic_gradient_vanishes(self) -> None:
        ds = _logistic_dataset()
        fit = fit_glm(ds, LinkFunction.LOGIT)
        design, _ = design_matrix(ds)
        gradient = design.T @ (ds.outcome - special.expit(design @ fit.coefficients))
        assert np.max(np.abs(gradient)) < 1e-6 * ds.n
        assert not fit.separated

    @pytest.mark.parametrize("seed", range(10))
    def test_logistic_matches_exact_newton(self, seed: int) -> None:
        ds = _logistic_dataset(n=200, seed=seed)
        fit = fit_glm(ds, LinkFunction.LOGIT)
        if fit.separated:
            pytest.skip("separated fixture has no finite maximum")
        design, _ = design_matrix(ds)
        y = ds.outcome

        def negative(beta: np.ndarray) -> tuple[float, np.ndarray]:
            eta = design @ beta
            return (
                float(-np.sum(y * eta - np.logaddexp(0.0, eta))),
                -design.T @ (y - special.expit(eta)),
            )

        def hessian(beta: np.ndarray) -> np.ndarray:
            mu = special.expit(design @ beta)
            return (design * (mu * (1.0 - mu))[:, None]).T @ design

        reference = optimize.minimize(
            negative, np.zeros(design.shape[1]), jac=True, hess=hessian,
            method="trust-exact", options={"gtol": 1e-12},
        )
        np.testing.assert_allclose(fit.coefficients, reference.x, rtol=0.0, atol=1e-8)

    def test_rank_deficiency_names_column(self) -> None:
        rng = np.random.default_rng(0)
        x1 = rng.normal(size=20)
        ds = validate(rng.normal(size=20), rng.integers(1, 3, size=20), np.column_stack([x1, 2.0 * x1]))
        with pytest.raises(RankDeficiencyError, match=r"column 'x2'"):
            fit_glm(ds, LinkFunction.IDENTITY)

    def test_covariate_collinear_with_hospital(self) -> None:
        hospital = np.array([1, 1, 2, 2, 2, 1])
        ds = validate([0.1, 0.4, 0.3, 0.9, 0.2, 0.5], hospital, (hospital == 2).astype(float))
        with pytest.raises(RankDeficiencyError):
            fit_glm(ds, LinkFunction.IDENTITY)

    def test_logit_requires_binary(self) -> None:
        ds = validate([0.0, 0.5, 1.0], [1, 1, 1])
        with pytest.raises(DataError, match="binary"):
            fit_glm(ds, LinkFunction.LOGIT)

    def test_separation_is_flagged_not_rejected(self) -> None:
        x = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
        ds = validate([0, 0, 0, 1, 1, 1], np.ones(6, dtype=int), x)
        fit = fit_glm(ds, LinkFunction.LOGIT)
        assert fit.separated
        assert fit.beta[0] > 5.0


# ---------------------------------------------------------------------------
# Tests: predict_mu
# ---------------------------------------------------------------------------

class TestPredictMu:
    def test_zero_coefficients_logit(self) -> None:
        fit = GlmFit.from_parameters(0.0, np.zeros(3), np.zeros(2), LinkFunction.LOGIT)
        assert predict_mu(fit, 1, [4.0, -2.0]) == 0.5
        assert predict_mu(fit, 3, [0.0, 9.0]) == 0.5

    def test_identity_direct_evaluation(self) -> None:
        fit = GlmFit.from_parameters(1.0, [0.0, 2.0], [1.0, 2.0], LinkFunction.IDENTITY)
        assert predict_mu(fit, 2, [0.0, 0.0]) == pytest.approx(3.0)
        assert predict_mu(fit, 1, [1.0, 1.0]) == pytest.approx(4.0)

    def test_unknown_hospital(self) -> None:
        fit = GlmFit.from_parameters(0.0, [0.0, 1.0], [0.5], LinkFunction.IDENTITY)
        with pytest.raises(DataError, match="unknown hospital"):
            predict_mu(fit, 3, [0.0])

    def test_wrong_covariate_length(self) -> None:
        fit = GlmFit.from_parameters(0.0, [0.0, 1.0], [0.5], LinkFunction.IDENTITY)
        with pytest.raises(DataError, match="expected 1 covariates"):
            predict_mu(fit, 1, [0.0, 1.0])

    def test_reference_offset_must_be_zero(self) -> None:
        with pytest.raises(ValueError, match="alpha"):
            GlmFit.from_parameters(0.0, [1.0, 2.0], [], LinkFunction.IDENTITY)


# ---------------------------------------------------------------------------
# Tests: fit_multinomial / predict_assignment
# ---------------------------------------------------------------------------

class TestFitMultinomial:
    def test_two_hospitals_equal_binary_logistic(self) -> None:
        ds = _assignment_dataset(m=2)
        fit = fit_multinomial(ds, 0)
        binary = fit_glm(ds.with_outcome(ds.hospital.astype(float)), LinkFunction.LOGIT, include_hospitals=False)
        np.testing.assert_allclose(fit.coefficient_matrix[0], binary.coefficients, atol=1e-6)
        probs = fit.probability_table(ds.covariates)[:, 1]
        np.testing.assert_allclose(probs, binary.mean_table(ds.covariates)[:, 0], atol=1e-8)

    def test_no_covariates_gives_empirical_shares(self) -> None:
        ds = validate(np.zeros(10), [1, 1, 1, 1, 2, 2, 3, 3, 3, 3])
        fit = fit_multinomial(ds, 0)
        np.testing.assert_allclose(predict_assignment(fit, []), [0.4, 0.2, 0.4], atol=1e-10)

    def test_threshold_above_n_pins_every_slope(self) -> None:
        ds = _assignment_dataset()
        fit = fit_multinomial(ds, ds.n + 1)
        assert fit.intercept_only.all()
        np.testing.assert_array_equal(fit.phis, 0.0)
        shares = ds.volumes / ds.n
        for x in ([0.0, 0.0], [3.0, -2.0]):
            np.testing.assert_allclose(predict_assignment(fit, x), shares, atol=1e-10)
        assert fit.eta_covariance.shape == (2, 2)

    def test_free_mask_skips_small_hospitals(self) -> None:
        ds = _assignment_dataset()
        threshold = int(ds.volumes.max())
        fit = fit_multinomial(ds, threshold)
        small = ds.volumes < threshold
        np.testing.assert_array_equal(fit.intercept_only, small)
        assert fit.eta.size == (ds.m - 1) + 2 * int(np.sum(~small[1:]))
        assert fit.eta_covariance.shape == (fit.eta.size, fit.eta.size)

    def test_gradient_vanishes(self) -> None:
        ds = _assignment_dataset()
        fit = fit_multinomial(ds, 0)
        probs = fit.probability_table(ds.covariates)
        onehot = np.eye(ds.m)[ds.hospital]
        x1 = np.column_stack([np.ones(ds.n), ds.covariates])
        gradient = (onehot - probs)[:, 1:].T @ x1
        assert np.max(np.abs(gradient)) < 1e-6 * ds.n

    def test_rows_sum_to_one(self) -> None:
        fit = fit_multinomial(_assignment_dataset(), 0)
        x = np.random.default_rng(9).normal(scale=3.0, size=(50, 2))
        table = fit.probability_table(x)
        assert np.all(table > 0.0)
        np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-12)

    def test_needs_two_hospitals(self) -> None:
        with pytest.raises(DataError, match="at least 2"):
            fit_multinomial(validate([0.0, 1.0], [1, 1]), 0)

    def test_negative_threshold(self) -> None:
        with pytest.raises(DataError, match="volume_threshold"):
            fit_multinomial(_assignment_dataset(), -1)


class TestPredictAssignment:
    def test_zero_parameters_are_uniform(self) -> None:
        np.testing.assert_allclose(predict_assignment(_zero_assignment(4, 2), [1.5, -0.3]), 0.25)

    def test_logit_zero(self) -> None:
        fit = _with_slopes(_zero_assignment(2, 1), [[1.0]])
        np.testing.assert_allclose(predict_assignment(fit, [0.0]), [0.5, 0.5])

    def test_large_intercept_without_overflow(self) -> None:
        fit = _zero_assignment(2, 1).with_eta([20.0, 0.0])
        probs = predict_assignment(fit, [0.0])
        assert probs[0] == pytest.approx(special.expit(-20.0), rel=1e-12)
        assert probs[0] == pytest.approx(2.06e-9, rel=1e-2)
        assert probs[1] == pytest.approx(1.0 - special.expit(-20.0), rel=1e-15)

    def test_with_eta_keeps_pinned_slopes(self) -> None:
        fit = AssignmentFit(
            gammas=np.zeros(2),
            phis=np.zeros((2, 1)),
            intercept_only=np.array([False, True, False]),
            eta_covariance=np.eye(3),
            volume_threshold=5,
        )
        moved = fit.with_eta([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(moved.gammas, [1.0, 2.0])
        np.testing.assert_array_equal(moved.phis[:, 0], [0.0, 3.0])

