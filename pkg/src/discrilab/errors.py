"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(Exception):
    """Invalid or inconsistent configuration."""


class DataError(Exception):
    """Bad or missing input artifact (file parse failures, shortfalls)."""


class NumericError(Exception):
    """Non-finite values or numeric divergence."""
