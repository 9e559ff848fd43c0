"""Exception taxonomy shared across the package."""


class CdngpError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CdngpError, ValueError):
    """Invalid configuration, shapes, or arguments."""


class ContractViolation(CdngpError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(CdngpError, FloatingPointError):
    """Non-finite values or numerical failure, with the offending stage named."""


class OutOfRangeError(CdngpError, ValueError):
    """A query (frame/time) falls outside the trained or valid range."""


class CheckpointFormatError(CdngpError, ValueError):
    """Checkpoint or dataset container is malformed, truncated, or version-incompatible."""


class SceneSpecError(CdngpError, ValueError):
    """A synthetic scene specification failed validation (e.g. non-convergent oracle)."""
