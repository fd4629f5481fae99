"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message wording.
"""

from __future__ import annotations


class HetsegError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class ConfigError(HetsegError):
    """Invalid configuration (bad values, unknown keys, schema violations)."""

    category = "config"

    def __init__(self, errors: list[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = errors
        super().__init__("; ".join(errors))


class DataError(HetsegError):
    """Invalid or inconsistent data (shapes, files, masks)."""

    category = "data"


class TrainingDivergence(HetsegError):
    """Training produced a non-finite loss."""

    category = "divergence"


class MissingStageError(HetsegError):
    """A prerequisite pipeline stage has not been run."""

    category = "missing-stage"
