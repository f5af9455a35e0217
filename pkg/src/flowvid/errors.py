"""Exception types raised across the package."""


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    pass


class NonInvertibleWeightError(SingularMatrixError):
    pass


class UsageError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


class TrainingDivergedError(RuntimeError):
    """NaN detected before any checkpoint existed to roll back to."""


class FormatError(ValueError):
    """Malformed on-disk container; the message names the failing field."""


class CompatibilityError(ValueError):
    pass
