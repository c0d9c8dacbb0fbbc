"""Exception types shared across the package."""


class HumangeoError(Exception):
    """Base class for all package errors."""


class ShapeError(HumangeoError, ValueError):
    """Tensor or layer shapes are incompatible."""


class UsageError(HumangeoError, ValueError):
    """An operation was called with invalid arguments."""


class FormatError(HumangeoError, ValueError):
    """A binary or text artifact is malformed."""


class ParseError(FormatError):
    """A manifest or split file contains invalid rows.

    ``offenders`` holds ``(line_number, message)`` pairs.
    """

    def __init__(self, path, offenders):
        self.path = str(path)
        self.offenders = list(offenders)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.offenders)
        super().__init__(f"{self.path}: {lines}")


class MissingAnnotationError(UsageError):
    """Human-based pooling requested for a record without a bounding box."""


class DegenerateFeatureError(UsageError):
    """A feature vector cannot be unit-normalized because it is all zeros."""


class TrainingDivergedError(HumangeoError, RuntimeError):
    """Loss became non-finite during training."""
