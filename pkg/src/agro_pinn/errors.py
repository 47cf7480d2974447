"""Exception hierarchy; each class maps to one CLI exit code."""


class AgroPinnError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(AgroPinnError, ValueError):
    category = "config"
    exit_code = 2


class DataError(AgroPinnError, ValueError):
    category = "data"
    exit_code = 3


class NumericError(AgroPinnError, ArithmeticError):
    category = "numeric"
    exit_code = 4
