"""Exception hierarchy shared across the package."""


class LingsegError(Exception):
    """Base class for all errors raised by lingseg."""


class DimensionError(LingsegError):
    """Tensor shapes are inconsistent with the requested operation."""


class ParameterError(LingsegError):
    """An operation parameter is outside its valid range."""


class ConfigError(LingsegError):
    """A configuration value violates a structural constraint."""


class ContractError(LingsegError):
    """A call precondition was violated."""


class GenerationError(LingsegError):
    """Synthetic scene sampling failed to produce a valid sample."""


class DatasetError(LingsegError):
    """An on-disk dataset is missing files or contains malformed records."""


class CheckpointError(LingsegError):
    """A checkpoint file is malformed, truncated, or version-incompatible."""


class TrainingError(LingsegError):
    """Training aborted (for example on a non-finite loss)."""
