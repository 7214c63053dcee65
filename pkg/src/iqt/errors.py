"""Exception types shared across the package."""


class FormatError(ValueError):
    """Raised for malformed or unsupported file contents."""


class ShapeError(ValueError):
    """Raised when tensor/volume shapes are incompatible.

    The message always names both offending shapes.
    """

    def __init__(self, message, shape_a=None, shape_b=None):
        if shape_a is not None or shape_b is not None:
            message = f"{message}: {shape_a} vs {shape_b}"
        super().__init__(message)
        self.shape_a = shape_a
        self.shape_b = shape_b


class SpecError(ValueError):
    """Raised for inconsistent model/architecture specifications."""


class CapabilityError(RuntimeError):
    """Raised when an operation needs a feature the model was built without."""


class EstimationError(ValueError):
    """Raised when a statistic cannot be estimated from the given data."""
