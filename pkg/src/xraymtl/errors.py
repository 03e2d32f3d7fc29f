"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
TrainingDiverged -> 4. Everything else is a plain bug and escapes.
"""


class XrayMtlError(Exception):
    """Base class for package errors."""


class ConfigError(XrayMtlError):
    """Invalid or inconsistent configuration."""


class DataError(XrayMtlError):
    """Broken dataset on disk or invalid labels."""


class TrainingDiverged(XrayMtlError):
    """A training step produced a non-finite loss."""


class CheckpointError(XrayMtlError):
    """Unreadable, truncated or mismatched checkpoint file."""
