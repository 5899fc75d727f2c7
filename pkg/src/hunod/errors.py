"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class HunodError(Exception):
    exit_code = 1


class ConfigError(HunodError, ValueError):
    """Invalid parameters or configuration."""

    exit_code = 1


class DataError(HunodError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class NumericError(HunodError, ArithmeticError):
    """Non-finite values produced during a numeric procedure."""

    exit_code = 3
