"""Penalty-risk workbench for SBPP-protected networks.

Simulates SLA penalties under random link failures and trains a
message-passing surrogate that predicts per-SLA Student-t penalty
distributions.
"""

from risknet.errors import DataError, NumericalError, ParameterError, ParseError

__version__ = "0.1.0"

__all__ = ["DataError", "NumericalError", "ParameterError", "ParseError", "__version__"]
