"""Exception hierarchy shared by every subpackage.

The CLI maps these onto process exit codes (see ``anyxr.cli``).
"""


class AnyXRError(Exception):
    """Base class for all package errors."""


class ShapeError(AnyXRError, ValueError):
    pass


class ContractError(AnyXRError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(AnyXRError, ValueError):
    pass


class DataError(AnyXRError, ValueError):
    pass


class NumericError(AnyXRError, ArithmeticError):
    """Non-finite values appeared (divergence, bad probe point, ...)."""


class PreconditionError(AnyXRError, RuntimeError):
    """A training stage was started before the stages it depends on."""


class CheckpointError(AnyXRError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class UndefinedMetricError(AnyXRError, ValueError):
    """Metric is undefined for the given labels (e.g. a single class)."""
