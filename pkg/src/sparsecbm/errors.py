"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value or an unsatisfiable request."""


class DataError(ValueError):
    """Malformed dataset file, schema violation, or corrupted artifact."""


class NumericError(ArithmeticError):
    """Non-finite value encountered during forward/backward computation."""

    def __init__(self, message: str, block: str | None = None):
        self.block = block
        if block is not None:
            message = f"{message} (block: {block})"
        super().__init__(message)
