"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
DataError exits 2, DivergenceError exits 3.
"""


class CamidError(Exception):
    """Base class for all package errors."""


class DataError(CamidError):
    """Bad or inconsistent input data (missing files, broken manifests,
    precondition violations on datasets)."""


class DivergenceError(CamidError):
    """Training produced a non-finite value. Carries the step index when
    raised from the training loop."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(CamidError):
    """Invalid configuration (unknown keys, out-of-range values,
    mismatched network specs)."""
