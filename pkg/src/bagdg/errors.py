"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, so every failure that can
reach a user should be one of them.
"""


class BagError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ContractError(BagError, ValueError):
    """A caller broke a shape or value precondition."""

    exit_code = 2


class ConfigError(BagError, ValueError):
    exit_code = 2


class NumericalError(BagError, ArithmeticError):
    """Non-finite values or a solver that failed to converge."""

    exit_code = 3


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class CalibrationError(BagError, ValueError):
    """Calibration statistics too weak for the requested correction."""

    exit_code = 3


class StorageError(BagError, OSError):
    """Unreadable, truncated or incompatible files."""

    exit_code = 4
