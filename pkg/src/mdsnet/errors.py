"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class MDSError(Exception):
    exit_code = 1


class ConfigurationError(MDSError, ValueError):
    """Inconsistent shapes, sizes or settings detected before any work is done."""

    exit_code = 1


class UsageError(MDSError, ValueError):
    exit_code = 1


class DataError(MDSError):
    """Missing or malformed files on disk."""

    exit_code = 2


class ParseError(DataError, ValueError):
    pass


class NumericError(MDSError, ArithmeticError):
    """Non-finite loss or failed gradient check."""

    exit_code = 3
