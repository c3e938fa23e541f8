"""Exception types shared across the library."""


class LeDetrError(ValueError):
    """Base class for all library errors."""


class ShapeError(LeDetrError):
    """Tensor extents do not satisfy an operation's contract."""


class NumericError(LeDetrError):
    """Non-finite values where finite input is required."""


class ParameterError(LeDetrError):
    """Scalar argument outside its valid range."""


class WindowError(LeDetrError):
    """Attention window does not fit the feature map."""


class ConfigError(LeDetrError):
    """Invalid or unknown model configuration."""
