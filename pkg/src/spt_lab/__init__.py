"""Simulation and verification laboratory for equity-market models.

Simulates multi-asset log-price diffusions, builds portfolio and trading
rules on top of them, and verifies growth, diversity, rank, arbitrage, and
pricing relations numerically, path by path.
"""

from .errors import (
    ConfigError,
    IntegrationFailureError,
    InvalidArgumentError,
    InvalidModelError,
    NumericFailureError,
    SptLabError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "IntegrationFailureError",
    "InvalidArgumentError",
    "InvalidModelError",
    "NumericFailureError",
    "SptLabError",
    "__version__",
]
