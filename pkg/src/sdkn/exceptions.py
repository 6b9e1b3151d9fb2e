"""Exception hierarchy shared by all subpackages.

The CLI maps these onto exit codes: configuration and usage problems exit
with 2, numerical failures with 4.
"""


class SDKNError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SDKNError, ValueError):
    """Inputs, shapes or settings are inconsistent with each other."""


class UsageError(SDKNError, ValueError):
    """An API was called in a way its contract does not allow."""


class NumericalError(SDKNError, ArithmeticError):
    """A computation produced non-finite values or failed to factorize."""
