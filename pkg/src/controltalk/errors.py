"""Error types shared across the package.

The CLI maps these onto stable exit codes (config 2, data 3, numeric 4).
"""


class ControlTalkError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ControlTalkError):
    """Invalid or inconsistent run configuration."""


class DataError(ControlTalkError):
    """Missing, malformed, or mismatched input data."""


class DimensionError(DataError):
    """Array shapes disagree with the declared keypoint/feature layout."""


class ValidationError(DataError):
    """A value violates a structural invariant (e.g. non-orthonormal rotation)."""


class NumericError(ControlTalkError):
    """Non-finite values or failed convergence during optimization."""
