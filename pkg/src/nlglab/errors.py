class NumericalFailure(ArithmeticError):
    """A NaN/Inf appeared mid-computation. ``step`` is the loop index, if any."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} at step {step}")
        self.step = step


class TrainingFailure(NumericalFailure):
    """Loss diverged during training."""


class DegenerateInput(ValueError):
    """Input has no usable direction (e.g. normalizing a zero vector)."""


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""
