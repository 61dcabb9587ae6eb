"""Exception hierarchy shared across the package.

Every error carries a stable machine-parsable ``code`` so the CLI can emit
one-line diagnostics of the form ``<code>: <message>``.
"""

from __future__ import annotations


class PolyfuseError(Exception):
    """Base class for all package errors."""

    code = "error"


class ShapeError(PolyfuseError):
    """Tensor dimensions incompatible with the requested operation."""

    code = "dimension-error"


class ConfigError(PolyfuseError):
    """Invalid configuration value or combination."""

    code = "config-error"


class FormatError(PolyfuseError):
    """On-disk artifact missing, truncated, or malformed."""

    code = "format-error"

    def __init__(self, message: str, path=None, offset=None):
        if path is not None:
            message = f"{path}: {message}"
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.path = path
        self.offset = offset


class MetricError(PolyfuseError):
    """Metric input violates its precondition (e.g. rows not normalized)."""

    code = "metric-error"


class NumericError(PolyfuseError):
    """Non-finite value where a finite one is required."""

    code = "numeric-error"


class DivergedError(PolyfuseError):
    """Training loss became non-finite; carries the offending epoch."""

    code = "diverged-run"

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class TooFewSamplesError(PolyfuseError):
    """Dataset too small for the requested fold layout."""

    code = "too-few-samples"
