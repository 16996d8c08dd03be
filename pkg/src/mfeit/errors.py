"""Failure classes shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError and
other I/O trouble -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


class DataFormatError(IOError):
    """Malformed container, checkpoint, or image file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(ArithmeticError):
    """Singular system, divergence, or non-finite iterate."""
