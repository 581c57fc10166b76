"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not conform to an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class UnsupportedOp(RuntimeError):
    """Primitive has no registered forward or backward rule."""


class SelectionError(ValueError):
    """Retention count is outside the valid range for the sliced axis."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ValidationError(ValueError):
    """Runtime data fails a documented precondition."""


class PretrainError(RuntimeError):
    """Source pretraining missed its accuracy threshold."""

    def __init__(self, message: str, accuracy: float):
        super().__init__(message)
        self.accuracy = accuracy


class ReportError(RuntimeError):
    """Report assembly is missing a required artifact."""
