"""Exception types shared across the package."""


class StdaiError(Exception):
    """Base class for all errors raised by stdai."""


class ShapeError(StdaiError, ValueError):
    """Incompatible tensor shapes for a primitive."""

    def __init__(self, primitive, message):
        self.primitive = primitive
        super().__init__(f"{primitive}: {message}")


class TrainingHalted(StdaiError, RuntimeError):
    """Raised when an optimizer step sees non-finite values."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(f"training halted at step {step}: {message}")


class BundleError(StdaiError, ValueError):
    """Malformed or inconsistent on-disk bundle."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class DegenerateConfigurationError(StdaiError, ValueError):
    """Point configuration cannot determine a transform."""


class ConfigError(StdaiError, ValueError):
    """Invalid run or stage configuration."""
