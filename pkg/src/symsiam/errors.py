"""Exception hierarchy shared by every subpackage.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3 and numeric failures with 4.
"""


class SymSiamError(Exception):
    exit_code = 1


class ConfigError(SymSiamError, ValueError):
    exit_code = 2


class DataError(SymSiamError):
    exit_code = 3


class InsufficientDataError(DataError, ValueError):
    pass


class NumericError(SymSiamError, ArithmeticError):
    exit_code = 4


class StateError(SymSiamError, RuntimeError):
    exit_code = 1


class UndefinedMetricError(SymSiamError, ValueError):
    exit_code = 3
