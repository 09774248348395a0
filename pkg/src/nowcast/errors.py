"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line front end
reports when the error escapes a subcommand.
"""


class NowcastError(Exception):
    exit_code = 1


class ConfigurationError(NowcastError, ValueError):
    exit_code = 1


class ShapeError(NowcastError, ValueError):
    exit_code = 1


class StatisticsError(NowcastError, ValueError):
    exit_code = 1


class FormatError(NowcastError):
    exit_code = 3

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericError(NowcastError, ArithmeticError):
    exit_code = 4


class SingularMatrixError(NumericError):
    pass
