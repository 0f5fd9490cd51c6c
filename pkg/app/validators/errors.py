class GcdValidationError(ValueError):
    """Raised when an input violates an operation or configuration precondition."""
    pass


class ShapeMismatchError(GcdValidationError):
    """Raised when tensor extents are incompatible for an operation."""
    pass


class ConfigValidationError(GcdValidationError):
    """Raised when a run configuration fails validation."""
    pass


class DatasetFormatError(OSError):
    """Raised when a dataset or checkpoint file is malformed."""
    pass


class InfiniteDivergenceError(ArithmeticError):
    """Raised when a KL divergence is infinite (q_t = 0 where p_t > 0)."""
    pass


class NumericFailure(ArithmeticError):
    """Raised when training produces NaN/Inf or a gradient check fails."""
    pass


class NonFiniteError(GcdValidationError):
    """Raised when an operation receives NaN or infinite values."""
    pass
