"""Crowd counting with multi-channel deep supervision on a small numpy autodiff core."""
from .errors import ConfigurationError, DataError, MDSError, NumericError, ParseError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DataError", "MDSError", "NumericError", "ParseError", "UsageError", "__version__"]
