"""
File Manager — path validation for inputs and outputs.
"""

from __future__ import annotations

import logging
from pathlib import Path

from backend.config import ALLOWED_INPUT_EXTENSIONS, ALLOWED_OUTPUT_EXTENSIONS
from backend.models.errors import ConfigError

logger = logging.getLogger(__name__)


def _check_extension(path: Path, allowed: set[str]) -> str:
    ext = path.suffix.lower()
    if ext not in allowed:
        raise ConfigError(
            f"Unsupported file type '{ext}' for {path.name}. "
            f"Allowed: {', '.join(sorted(allowed))}"
        )
    return ext


def validate_input_path(path: Path) -> Path:
    """
    Check that *path* is an existing CSV file.

    Raises:
        ConfigError: wrong extension or missing file.
    """
    _check_extension(path, ALLOWED_INPUT_EXTENSIONS)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    return path


def validate_output_path(path: Path, expected: str | None = None) -> Path:
    """
    Check the extension of an output path and create its parent directory.

    Args:
        path: Destination file.
        expected: Required extension (e.g. ``'.csv'``); any allowed one if ``None``.

    Raises:
        ConfigError: disallowed extension.
    """
    ext = _check_extension(path, ALLOWED_OUTPUT_EXTENSIONS)
    if expected is not None and ext != expected:
        raise ConfigError(f"{path.name}: expected a {expected} file")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path
