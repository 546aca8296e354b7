class ConfigError(ValueError):
    """Invalid run or model configuration."""


class WeightsError(ValueError):
    """Weight file missing tensors, malformed, or shaped wrong for the model."""


class ImageError(ValueError):
    """Input image unreadable or not matching the model's expected shape."""


class ScheduleError(ValueError):
    """Compression schedule cannot be executed on this model."""


class NumericalError(ArithmeticError):
    """Non-finite activations during a forward pass."""
