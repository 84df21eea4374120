"""Exception hierarchy shared across the package.

Each class carries a short ``category`` string that the command line layer
reports alongside a nonzero exit code.
"""


class GdhmmError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(GdhmmError, ValueError):
    category = "config"
    exit_code = 2


class SchemaError(GdhmmError, ValueError):
    category = "schema"
    exit_code = 3


class DataError(GdhmmError, ValueError):
    category = "data"
    exit_code = 4


class DomainError(GdhmmError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    category = "domain"
    exit_code = 4


class NumericalError(GdhmmError, ArithmeticError):
    category = "numerical"
    exit_code = 5


class OptimizationError(NumericalError):
    """Raised when an optimizer produces a non-finite objective.

    ``last_iterate`` holds the last parameter vector with a finite objective.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class FitError(NumericalError):
    """EM failure; ``result`` is the last complete FitResult (or None)."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
