"""Exception hierarchy. Each class maps to one CLI exit code."""


class SpendTrajError(Exception):
    exit_code = 1


class ConfigError(SpendTrajError, ValueError):
    """Bad configuration, usage or split parameters."""

    exit_code = 2


class ArchitectureError(ConfigError):
    pass


class SchemaError(SpendTrajError, ValueError):
    """Malformed or inconsistent input data (files, tables, transactions)."""

    exit_code = 3


class ParseError(SchemaError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class DimensionError(SchemaError):
    pass


class MetricError(SchemaError):
    pass


class NumericError(SpendTrajError, ArithmeticError):
    exit_code = 4
