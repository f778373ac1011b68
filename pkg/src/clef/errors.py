"""Shared exception types; the CLI maps these onto exit codes."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""
