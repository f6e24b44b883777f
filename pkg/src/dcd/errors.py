"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class DCDError(Exception):
    exit_code = 1


class ShapeError(DCDError, ValueError):
    exit_code = 1


class NumericError(DCDError, ArithmeticError):
    exit_code = 1


class UsageError(DCDError, ValueError):
    exit_code = 1


class ConfigError(DCDError, ValueError):
    exit_code = 2


class FormatError(DCDError, ValueError):
    exit_code = 3


class DivergenceError(DCDError, RuntimeError):
    """Training produced a non-finite or exploding loss.

    ``record`` holds whatever partial run record existed at the time of abort.
    """

    exit_code = 4

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class GradcheckError(DCDError):
    exit_code = 5
