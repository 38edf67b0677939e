class RiskNetError(Exception):
    """Base class for all package errors."""


class ParameterError(RiskNetError, ValueError):
    """Invalid argument or inconsistent input object."""


class ParseError(RiskNetError, ValueError):
    """Malformed file or document."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(RiskNetError):
    """Problem with a dataset, checkpoint or penalty table on disk."""


class NumericalError(RiskNetError, ArithmeticError):
    """Non-finite value produced during training or differentiation."""
