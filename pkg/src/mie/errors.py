"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation problems exit 1,
numeric/runtime problems exit 2.
"""


class MieError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MieError):
    """Bad input: wrong shape, malformed config, violated precondition."""


class DataFormatError(ValidationError):
    """Malformed on-disk artifact (dataset container, checkpoint)."""


class NumericError(MieError):
    """Numeric failure: non-finite values, no convergence."""
