"""
Exception taxonomy shared by services, routers and the CLI.

Each class carries the process exit code the CLI reports for it.
"""

from __future__ import annotations


class VarianceLabError(Exception):
    """Root of every error raised on purpose by this package."""
    exit_code: int = 1


class ConfigError(VarianceLabError, ValueError):
    """Bad flags, unknown columns, unreadable configuration."""
    exit_code = 2


class DataError(VarianceLabError, ValueError):
    """Input data violates a dataset contract."""
    exit_code = 3


class RankDeficiencyError(DataError):
    """Design matrix is not of full column rank."""

    def __init__(self, column: str) -> None:
        super().__init__(f"design matrix is rank deficient at column '{column}'")
        self.column = column


class NumericalError(VarianceLabError, RuntimeError):
    """A fit or a resampling run failed numerically."""
    exit_code = 4


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration limit."""

    def __init__(self, solver: str, iterations: int) -> None:
        super().__init__(f"{solver} did not converge after {iterations} iterations")
        self.solver = solver
        self.iterations = iterations


class OutputError(VarianceLabError, OSError):
    """A report or table could not be read from or written to disk."""
    exit_code = 5
