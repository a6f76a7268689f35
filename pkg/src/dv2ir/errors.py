"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class DV2IRError(Exception):
    exit_code = 1


class ShapeError(DV2IRError, ValueError):
    exit_code = 5


class NumericError(DV2IRError, ArithmeticError):
    exit_code = 4


class ContractError(DV2IRError):
    exit_code = 5


class ConfigError(DV2IRError, ValueError):
    exit_code = 2


class FormatError(DV2IRError):
    exit_code = 3


class UsageError(DV2IRError):
    exit_code = 2
