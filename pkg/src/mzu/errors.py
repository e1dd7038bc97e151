"""Exception types shared across the package."""


class MzuError(Exception):
    """Base class for all package errors."""


class ShapeError(MzuError):
    """Operand shapes do not conform for the requested operation."""


class ConfigError(MzuError):
    """A configuration value violates a structural constraint."""


class DataError(MzuError):
    """Input data is malformed or out of range."""


class CheckpointError(MzuError):
    """A checkpoint file is corrupt, truncated, or of the wrong version."""
