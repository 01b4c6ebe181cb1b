"""
Unit Tests for the RNG substreams.

Run with:  python -m pytest backend/tests/test_rng.py -v
"""

from __future__ import annotations

import numpy as np

from backend.utils.rng import Stream, child_seed, generator


class TestSubstreams:
    def test_same_key_same_draws(self) -> None:
        a = generator(7, Stream.THETA, 3).standard_normal(5)
        b = generator(7, Stream.THETA, 3).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_and_indices_differ(self) -> None:
        base = generator(7, Stream.THETA, 3).standard_normal(5)
        assert not np.array_equal(base, generator(7, Stream.ETA, 3).standard_normal(5))
        assert not np.array_equal(base, generator(7, Stream.THETA, 4).standard_normal(5))
        assert not np.array_equal(base, generator(8, Stream.THETA, 3).standard_normal(5))

    def test_request_order_does_not_matter(self) -> None:
        forward = [generator(1, Stream.REPLICATES, b).random() for b in range(4)]
        backward = [generator(1, Stream.REPLICATES, b).random() for b in reversed(range(4))]
        assert forward == backward[::-1]

    def test_child_seed(self) -> None:
        assert child_seed(5, Stream.ORACLE) == child_seed(5, Stream.ORACLE)
        assert child_seed(5, Stream.ORACLE) != child_seed(5, Stream.ORACLE, 1)
        assert 0 <= child_seed(5, Stream.REPLICATES, 9) < 2 ** 32
