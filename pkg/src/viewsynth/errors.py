"""Error taxonomy shared by the CLI exit-code mapping."""


class ConfigError(ValueError):
    """Bad configuration or flags (exit code 2)."""


class DataError(ValueError):
    """Missing or malformed inputs on disk (exit code 3)."""


class NumericError(RuntimeError):
    """Numerical failure such as a non-finite loss (exit code 4)."""
