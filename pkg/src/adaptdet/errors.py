"""Exception hierarchy shared across the package.

The CLI maps ConfigurationError to exit code 2 and every other
AdaptdetError (plus unexpected failures) to exit code 3.
"""


class AdaptdetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AdaptdetError):
    """Invalid configuration value, schema violation, or incompatible shapes."""


class ValidationError(AdaptdetError):
    """A dataset record or annotation violates its invariants."""


class InputError(AdaptdetError):
    """A runtime input (image, tensor) is malformed, e.g. non-finite pixels."""


class NumericError(AdaptdetError):
    """A computed quantity is NaN/inf where finiteness is required."""


class ContractViolation(AdaptdetError):
    """An operation was called outside its documented precondition."""


class TrainingDiverged(AdaptdetError):
    """Total loss exceeded the divergence bound; last good checkpoint was kept."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
