"""Structured deep kernel networks for learned LES closure terms."""
from .estimators import ANNRegressor, KernelRidgeRegressor, LESFilter, SDKNRegressor
from .exceptions import ConfigurationError, NumericalError, SDKNError, UsageError

__all__ = [
    "ANNRegressor",
    "ConfigurationError",
    "KernelRidgeRegressor",
    "LESFilter",
    "NumericalError",
    "SDKNError",
    "SDKNRegressor",
    "UsageError",
]
__version__ = "0.1.0"
