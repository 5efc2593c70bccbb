"""Exception hierarchy shared across the package.

Split roughly by blame: Audio/Data/Config errors mean the caller handed us
something bad (CLI exit code 2), Numerics/Checkpoint errors mean something
went wrong internally (CLI exit code 1).
"""


class CoughMaeError(Exception):
    """Base class for all package errors."""


class AudioError(CoughMaeError):
    """Unreadable, unsupported or degenerate audio input."""


class DataError(CoughMaeError):
    """Malformed manifest, labels or dataset layout."""


class ConfigError(CoughMaeError):
    """Invalid or unknown run-configuration content."""


class ShapeError(CoughMaeError):
    """Tensor or grid shape mismatch."""


class NumericsError(CoughMaeError):
    """Non-finite values or degenerate statistics."""


class CheckpointError(CoughMaeError):
    """Corrupt, truncated or incompatible checkpoint file."""
