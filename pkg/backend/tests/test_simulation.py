"""
Unit Tests for the simulation service (mechanism, oracle, study harness).

Run with:  python -m pytest backend/tests/test_simulation.py -v
"""

from __future__ import annotations

import numpy as np
import pytest

from backend.config import CASEMIX_EFFECTS, LOGISTIC_VARIANCE
from backend.models.errors import DataError
from backend.models.schemas import Estimator, HospitalParams, OutcomeKind, SimulationConfig
from backend.services.simulation import (
    draw_hospital_params,
    generate,
    mechanism,
    oracle_truth,
    run_study,
    with_hospital_params,
)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

ALPHA = [0.0, 1.0, -2.0, 0.5]


def _params(alpha: list[float] = ALPHA) -> HospitalParams:
    m = len(alpha)
    return HospitalParams(
        gamma=[0.0] + [0.3] * (m - 1),
        phi=[[0.0, 0.0]] + [[0.4, -0.2]] * (m - 1),
        alpha=alpha,
    )


def _config(**overrides) -> SimulationConfig:
    base = dict(n=400, m=4, seed=3, hospital_params=_params())
    base.update(overrides)
    return SimulationConfig(**base)


# ---------------------------------------------------------------------------
# Tests: hospital parameters and scenario switches
# ---------------------------------------------------------------------------

class TestMechanism:
    def test_reference_hospital_is_pinned(self) -> None:
        params = draw_hospital_params(6, seed=1)
        assert params.gamma[0] == 0.0
        assert params.phi[0] == [0.0, 0.0]
        assert len(params.alpha) == 6

    def test_params_depend_only_on_seed(self) -> None:
        assert draw_hospital_params(5, seed=7) == draw_hospital_params(5, seed=7)
        assert draw_hospital_params(5, seed=7) != draw_hospital_params(5, seed=8)

    def test_with_hospital_params_keeps_explicit_values(self) -> None:
        config = _config()
        assert with_hospital_params(config) is config
        drawn = with_hospital_params(SimulationConfig(n=10, m=2, seed=4))
        assert drawn.hospital_params == draw_hospital_params(2, seed=4)

    def test_switches(self) -> None:
        base = mechanism(_config())
        np.testing.assert_array_equal(base.beta, CASEMIX_EFFECTS)
        np.testing.assert_array_equal(base.alpha, ALPHA)

        assert not np.any(mechanism(_config(zero_hospital_effect=True)).alpha)
        randomized = mechanism(_config(randomized_assignment=True))
        assert not np.any(randomized.gamma) and not np.any(randomized.phi)
        np.testing.assert_array_equal(randomized.alpha, ALPHA)
        assert not np.any(mechanism(_config(no_casemix_effect=True)).beta)

    def test_m_must_match_params(self) -> None:
        with pytest.raises(ValueError, match="exactly m"):
            SimulationConfig(n=100, m=3, hospital_params=_params())


# ---------------------------------------------------------------------------
# Tests: generate
# ---------------------------------------------------------------------------

class TestGenerate:
    def test_deterministic(self) -> None:
        a, b = generate(_config(), 11), generate(_config(), 11)
        np.testing.assert_array_equal(a.outcome, b.outcome)
        np.testing.assert_array_equal(a.hospital, b.hospital)
        np.testing.assert_array_equal(a.covariates, b.covariates)
        assert not np.array_equal(generate(_config(), 12).outcome, a.outcome)

    def test_shape_and_names(self) -> None:
        ds = generate(_config(), 0)
        assert (ds.n, ds.m, ds.p) == (400, 4, 2)
        assert ds.covariate_names == ("x1", "x2")
        assert set(np.unique(ds.covariates[:, 1])) <= {0.0, 1.0}
        assert ds.volumes.min() > 0

    def test_randomized_assignment_has_equal_shares(self) -> None:
        ds = generate(_config(n=40_000, randomized_assignment=True), 5)
        np.testing.assert_allclose(ds.volumes / ds.n, 0.25, atol=0.015)

    def test_binary_is_thresholded_continuous(self) -> None:
        continuous = generate(_config(), 9)
        binary = generate(_config(outcome_kind=OutcomeKind.BINARY), 9)
        np.testing.assert_array_equal(binary.hospital, continuous.hospital)
        np.testing.assert_array_equal(binary.outcome, (continuous.outcome >= 0.0).astype(float))
        assert binary.outcome_kind is OutcomeKind.BINARY

    def test_impossible_assignment(self) -> None:
        params = HospitalParams(gamma=[0.0, -800.0], phi=[[0.0, 0.0], [0.0, 0.0]], alpha=[0.0, 0.0])
        with pytest.raises(DataError, match="no patients"):
            generate(SimulationConfig(n=5, m=2, hospital_params=params), 0)


# ---------------------------------------------------------------------------
# Tests: oracle_truth
# ---------------------------------------------------------------------------

class TestOracleTruth:
    def test_continuous_residual_is_logistic_variance(self) -> None:
        truth = oracle_truth(_config(), 10_000)
        assert truth.omega3 == LOGISTIC_VARIANCE
        assert truth.omega3_se == 0.0

    def test_zero_hospital_effect(self) -> None:
        for kind in OutcomeKind:
            truth = oracle_truth(_config(zero_hospital_effect=True, outcome_kind=kind), 20_000)
            assert truth.omega2 < 1e-20

    def test_randomized_continuous_omega2_is_alpha_spread(self) -> None:
        truth = oracle_truth(_config(randomized_assignment=True), 5_000)
        alpha = np.asarray(ALPHA)
        assert truth.omega2 == pytest.approx(np.mean((alpha - alpha.mean()) ** 2), rel=1e-10)

    def test_randomized_continuous_omega1(self) -> None:
        # Var(X1 + 2 X2) = 1 + 4 * 0.25
        truth = oracle_truth(_config(randomized_assignment=True), 200_000, seed=2)
        assert truth.omega1 == pytest.approx(2.0, rel=0.02)

    def test_binary_components_are_probabilities(self) -> None:
        truth = oracle_truth(_config(outcome_kind=OutcomeKind.BINARY), 50_000)
        assert 0.0 < truth.omega3 < 0.25
        assert truth.omega1 + truth.omega2 + truth.omega3 <= 0.25 + 1e-3

    def test_deterministic(self) -> None:
        assert oracle_truth(_config(), 8_000, seed=4) == oracle_truth(_config(), 8_000, seed=4)

    def test_standard_error_shrinks_with_draws(self) -> None:
        small = oracle_truth(_config(), 200_000, seed=1, batches=200)
        large = oracle_truth(_config(), 400_000, seed=1, batches=200)
        assert 1.2 <= small.omega1_se / large.omega1_se <= 1.65

    def test_too_few_draws(self) -> None:
        with pytest.raises(DataError, match="oracle_draws"):
            oracle_truth(_config(), 3)


# ---------------------------------------------------------------------------
# Tests: run_study
# ---------------------------------------------------------------------------

class TestRunStudy:
    def test_small_study(self) -> None:
        summary = run_study(_config(n=300, m=3, hospital_params=_params(ALPHA[:3])), 4, oracle_draws=2_000, threads=1)
        assert summary.failures == 0
        fe = [r for r in summary.rows if r.estimator is Estimator.FE]
        re = [r for r in summary.rows if r.estimator is Estimator.RE]
        assert [r.component for r in fe] == ["omega1", "omega2", "omega3", "equal_weight_omega2"]
        assert len(re) == 5
        for row in summary.rows:
            assert row.replications == 4
            assert row.mc_lower <= row.mean <= row.mc_upper
            assert (row.truth is None) == (not row.component.startswith("omega"))
        assert summary.replicates == []

    def test_keeps_replicates(self) -> None:
        config = _config(n=300, m=3, hospital_params=_params(ALPHA[:3]))
        summary = run_study(config, 4, oracle_draws=2_000, threads=1, keep_replicates=True)
        assert len(summary.replicates) == 8
        assert {r.replicate for r in summary.replicates} == {0, 1, 2, 3}
        assert all(r.tau2 is not None for r in summary.replicates if r.estimator is Estimator.RE)

    def test_independent_of_thread_count(self) -> None:
        config = _config(n=300, m=3, hospital_params=_params(ALPHA[:3]))
        one = run_study(config, 4, estimators=[Estimator.FE], oracle_draws=2_000, threads=1)
        two = run_study(config, 4, estimators=[Estimator.FE], oracle_draws=2_000, threads=2)
        assert one == two

    def test_draws_params_when_absent(self) -> None:
        summary = run_study(SimulationConfig(n=200, m=2, seed=6), 2, estimators=[Estimator.FE], oracle_draws=1_000, threads=1)
        assert summary.config.hospital_params == draw_hospital_params(2, seed=6)

    def test_rejects_zero_replications(self) -> None:
        with pytest.raises(DataError, match="replications"):
            run_study(_config(), 0)
