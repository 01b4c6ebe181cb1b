"""
Unit Tests for dataset validation and the empirical total variance.

Run with:  python -m pytest backend/tests/test_dataset.py -v
"""

from __future__ import annotations

import numpy as np
import pytest

from backend.models.errors import DataError
from backend.models.schemas import LinkFunction, OutcomeKind
from backend.services.dataset import default_ddof, empirical_total_variance, validate


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _binary(ones: int, n: int):
    outcome = np.zeros(n)
    outcome[:ones] = 1.0
    return validate(outcome, np.ones(n, dtype=int))


# ---------------------------------------------------------------------------
# Tests: validate
# ---------------------------------------------------------------------------

class TestValidate:
    def test_integer_labels_compact_in_sorted_order(self) -> None:
        ds = validate([0.1, 0.2, 0.3, 0.4], [5, 9, 5, 2])
        np.testing.assert_array_equal(ds.hospital + 1, [2, 3, 2, 1])
        assert ds.m == 3
        assert ds.hospital_labels == ("2", "5", "9")

    def test_string_labels(self) -> None:
        ds = validate([1.0, 2.0, 3.0], ["b", "a", "b"])
        np.testing.assert_array_equal(ds.hospital, [1, 0, 1])
        assert ds.hospital_labels == ("a", "b")

    def test_float_labels_that_are_integers(self) -> None:
        ds = validate([1.0, 2.0, 3.0], np.array([10.0, 3.0, 10.0]))
        assert ds.hospital_labels == ("3", "10")

    def test_binary_mode_rejects_other_values(self) -> None:
        with pytest.raises(DataError, match=r"outcome not in \{0,1\}"):
            validate([0.0, 1.0, 2.0], [1, 1, 2], outcome_kind=OutcomeKind.BINARY)

    def test_kind_is_inferred(self) -> None:
        assert validate([0, 1, 1], [1, 2, 2]).outcome_kind is OutcomeKind.BINARY
        assert validate([0, 1, 0.5], [1, 2, 2]).outcome_kind is OutcomeKind.CONTINUOUS

    def test_ragged_columns(self) -> None:
        with pytest.raises(DataError, match="ragged"):
            validate([0.0, 1.0, 1.0], [1, 2])

    def test_ragged_covariates(self) -> None:
        with pytest.raises(DataError, match="ragged"):
            validate([0.0, 1.0, 1.0], [1, 2, 2], covariates=np.zeros((2, 1)))

    def test_needs_two_patients(self) -> None:
        with pytest.raises(DataError, match="at least 2"):
            validate([1.0], [1])

    def test_non_finite_values(self) -> None:
        with pytest.raises(DataError, match="finite"):
            validate([0.0, np.nan], [1, 2])

    def test_covariate_names(self) -> None:
        ds = validate([0.0, 1.0], [1, 2], covariates=np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert ds.covariate_names == ("x1", "x2")
        assert ds.p == 2
        with pytest.raises(DataError, match="covariate name"):
            validate([0.0, 1.0], [1, 2], covariates=np.ones((2, 2)), covariate_names=["age"])

    def test_arrays_are_read_only(self) -> None:
        ds = validate([0.0, 1.0], [1, 2])
        with pytest.raises(ValueError):
            ds.outcome[0] = 5.0

    def test_volumes(self) -> None:
        ds = validate(np.zeros(5), ["a", "b", "b", "c", "c"])
        np.testing.assert_array_equal(ds.volumes, [1, 2, 2])

    def test_with_outcome_checks_length(self) -> None:
        ds = validate([0.0, 1.0, 1.0], [1, 2, 2])
        assert ds.with_outcome([1.0, 1.0, 0.0]).outcome.tolist() == [1.0, 1.0, 0.0]
        with pytest.raises(DataError, match="wrong length"):
            ds.with_outcome([1.0])


# ---------------------------------------------------------------------------
# Tests: empirical_total_variance
# ---------------------------------------------------------------------------

class TestEmpiricalTotalVariance:
    def test_binary_matches_p_times_one_minus_p(self) -> None:
        ds = _binary(447, 1000)
        assert np.isclose(empirical_total_variance(ds), 0.447 * 0.553, atol=1e-12)
        assert round(empirical_total_variance(ds), 3) == 0.247

    def test_constant_outcome_is_zero(self) -> None:
        ds = validate(np.full(5, 3.0), [1, 1, 2, 2, 2])
        assert empirical_total_variance(ds) == 0.0

    def test_two_binary_patients(self) -> None:
        ds = validate([0, 1], [1, 2])
        assert default_ddof(ds) == 0
        assert empirical_total_variance(ds) == pytest.approx(0.25)
        assert empirical_total_variance(ds, ddof=1) == pytest.approx(0.5)

    def test_continuous_uses_n_minus_one(self) -> None:
        ds = validate([1.0, 2.0, 4.5], [1, 1, 2])
        assert default_ddof(ds) == 1
        assert empirical_total_variance(ds) == pytest.approx(np.var([1.0, 2.0, 4.5], ddof=1))

    def test_row_permutation_invariance(self) -> None:
        rng = np.random.default_rng(3)
        y = rng.normal(size=50)
        hospital = rng.integers(1, 4, size=50)
        order = rng.permutation(50)
        a = empirical_total_variance(validate(y, hospital))
        b = empirical_total_variance(validate(y[order], hospital[order]))
        assert a == pytest.approx(b, rel=1e-14)

    def test_rejects_other_divisors(self) -> None:
        with pytest.raises(ValueError, match="ddof"):
            empirical_total_variance(validate([0.0, 1.0], [1, 2]), ddof=2)


# ---------------------------------------------------------------------------
# Tests: LinkFunction
# ---------------------------------------------------------------------------

class TestLinkFunction:
    def test_logit_round_trip(self) -> None:
        mu = np.concatenate([[1e-9, 1.0 - 1e-9], np.linspace(0.001, 0.999, 101)])
        back = LinkFunction.LOGIT.inverse(LinkFunction.LOGIT.link(mu))
        assert np.max(np.abs(back - mu)) < 1e-12

    def test_identity_round_trip(self) -> None:
        mu = np.array([-1e6, -2.5, 0.0, 3.25, 1e6])
        np.testing.assert_array_equal(LinkFunction.IDENTITY.inverse(LinkFunction.IDENTITY.link(mu)), mu)
