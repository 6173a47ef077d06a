"""Exception hierarchy shared by every fbk module."""


class FbkError(Exception):
    """Base class for all library errors."""


class DimensionError(FbkError, ValueError):
    """Shapes or geometries that do not compose."""


class ContractError(FbkError, RuntimeError):
    """A call violates a pairing contract, e.g. backward with a foreign cache."""


class ConfigError(FbkError, ValueError):
    """Invalid configuration value or unknown preset."""


class DataError(FbkError, ValueError):
    """Malformed labels or dataset contents."""


class TrainingAborted(FbkError, RuntimeError):
    """Raised when the optimizer sees non-finite gradients."""
