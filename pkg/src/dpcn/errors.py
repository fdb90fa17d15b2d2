class ConfigError(ValueError):
    """Bad run configuration (CLI exit code 1)."""


class DataError(ValueError):
    """Malformed or missing dataset / checkpoint content (CLI exit code 2)."""


class NumericError(ArithmeticError):
    """Non-finite loss or gradient (CLI exit code 3)."""
