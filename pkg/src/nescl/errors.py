"""Exception types shared across the package.

The CLI maps each class to a process exit code.
"""


class NesclError(Exception):
    exit_code = 1


class ConfigError(NesclError, ValueError):
    exit_code = 2


class DataError(NesclError, ValueError):
    exit_code = 3


class NumericError(NesclError, ArithmeticError):
    exit_code = 4
