"""Domain-adaptive object detection with multi-label conditioning.

A two-stage detector trained jointly with an image-level multi-label
recognition head, a prediction-conditioned adversarial domain aligner,
and a symmetric-KL consistency regularizer, evaluated on a built-in
synthetic two-domain shape benchmark.
"""

from .errors import (
    AdaptdetError,
    ConfigurationError,
    ContractViolation,
    InputError,
    NumericError,
    TrainingDiverged,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptdetError",
    "ConfigurationError",
    "ContractViolation",
    "InputError",
    "NumericError",
    "TrainingDiverged",
    "ValidationError",
    "__version__",
]
