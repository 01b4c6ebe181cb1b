"""
RNG substreams — deterministic, order-independent random streams.

Every consumer of randomness asks for a generator by (seed, stream, index);
the result depends only on those three values, never on which worker or
in which order it is requested.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Named substreams of one master seed."""
    THETA = 1
    ETA = 2
    HYPERPARAMETERS = 3
    REPLICATES = 4
    ORACLE = 5


def generator(seed: int, stream: Stream, index: int = 0) -> np.random.Generator:
    """Generator for draw *index* of *stream* under master *seed*."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.default_rng(sequence)


def child_seed(seed: int, stream: Stream, index: int = 0) -> int:
    """A plain integer seed derived from a substream (for nested harnesses)."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
