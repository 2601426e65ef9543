"""Decentralized RISE target tracking for networks of second-order agents."""

from rise_flock.errors import (
    DivergenceError,
    InsufficientDataError,
    NumericalError,
    RiseFlockError,
    SingularityError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DivergenceError",
    "InsufficientDataError",
    "NumericalError",
    "RiseFlockError",
    "SingularityError",
    "ValidationError",
    "__version__",
]
