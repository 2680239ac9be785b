"""Exception and warning types raised across the package."""


class GLMAEError(Exception):
    """Base class for all package errors."""


class InvalidWindowError(GLMAEError, ValueError):
    pass


class ShapeMismatchError(GLMAEError, ValueError):
    pass


class NonFiniteError(GLMAEError, ValueError):
    pass


class DegenerateInputError(GLMAEError, ValueError):
    pass


class TokenizationError(GLMAEError, ValueError):
    def __init__(self, message: str, axis: int | None = None):
        super().__init__(message)
        self.axis = axis


class MaskRatioError(GLMAEError, ValueError):
    pass


class NumericFailure(GLMAEError, FloatingPointError):
    """A non-finite value showed up in a forward pass or a loss term.

    ``where`` names the offending block index or loss part.
    """

    def __init__(self, message: str, where=None):
        super().__init__(message)
        self.where = where


class IncompatibleCheckpointError(GLMAEError, ValueError):
    pass


class VacuousLossWarning(UserWarning):
    """A loss term was asked to average over an empty set and returned 0."""
