"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(ValueError):
    """Missing, malformed, or unwritable data artifact."""


class NumericalError(RuntimeError):
    """Non-finite value detected during forward/backward or optimization."""
