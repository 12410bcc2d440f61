"""Exception hierarchy shared by every module."""


class IncrementalCNNError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IncrementalCNNError, ValueError):
    pass


class ConfigurationError(IncrementalCNNError, ValueError):
    pass


class DataError(IncrementalCNNError, ValueError):
    pass


class FormatError(IncrementalCNNError, ValueError):
    """A file (dataset batch, checkpoint, run directory) is malformed."""


class UsageError(IncrementalCNNError, RuntimeError):
    """An operation was called in a state where it is not allowed."""


class NumericError(IncrementalCNNError, ArithmeticError):
    pass


class PartitionError(IncrementalCNNError, ValueError):
    pass


class ComparisonError(IncrementalCNNError, ValueError):
    pass
