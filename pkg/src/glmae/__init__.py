"""Global-local masked autoencoder pre-training for 3D volumes."""

from .errors import (
    DegenerateInputError,
    GLMAEError,
    IncompatibleCheckpointError,
    InvalidWindowError,
    MaskRatioError,
    NonFiniteError,
    NumericFailure,
    ShapeMismatchError,
    TokenizationError,
    VacuousLossWarning,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError",
    "GLMAEError",
    "IncompatibleCheckpointError",
    "InvalidWindowError",
    "MaskRatioError",
    "NonFiniteError",
    "NumericFailure",
    "ShapeMismatchError",
    "TokenizationError",
    "VacuousLossWarning",
]
