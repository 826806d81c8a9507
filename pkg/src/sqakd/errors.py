"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: config 2, data 3, numeric 4, I/O 5.
"""


class SqakdError(Exception):
    """Base class for all package errors."""


class ConfigError(SqakdError):
    """Invalid configuration: bad keys, bad values, incompatible settings."""


class DimensionError(ConfigError):
    """Tensor shapes do not satisfy an operation's contract."""


class DegenerateIntervalError(ConfigError):
    """A quantizer clip interval has collapsed (lower bound >= upper bound)."""


class DataError(SqakdError):
    """Malformed or inconsistent input data."""


class MissingLabelsError(DataError):
    """An objective that needs ground-truth labels was given none."""


class DegenerateInputError(DataError):
    """Input data makes a quantizer's scaling undefined (e.g. all zeros)."""


class NumericError(SqakdError):
    """Non-finite values encountered during training or evaluation."""
