"""Exception hierarchy shared across the package.

Every error the library raises deliberately derives from ``MmbtError`` so
callers (and the CLI exit-code mapping) can distinguish our failures from
genuine bugs.
"""


class MmbtError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MmbtError):
    """Tensor shapes do not line up for the requested operation."""


class ParameterError(MmbtError):
    """A numeric hyperparameter is outside its valid range."""


class ContractError(MmbtError):
    """An operation was called in a way its contract forbids."""


class ConfigError(MmbtError):
    """Invalid configuration value, unknown key, or malformed config file."""


class DataError(MmbtError):
    """Bad dataset content: missing studies, invalid labels, empty inputs."""


class StratificationError(DataError):
    """A cross-validation fold ended up without both classes."""


class MetricError(MmbtError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class NumericalError(MmbtError):
    """Non-finite values where finite ones are required."""


class TrainingError(MmbtError):
    """Training diverged or produced non-finite gradients."""


class UsageError(MmbtError):
    """Bad command-line invocation."""
