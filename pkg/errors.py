class WasserpathError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(WasserpathError):
    """Invalid or incomplete experiment configuration."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ModelError(WasserpathError):
    """Unknown model, invalid parameter, or failed coefficient check."""


class DomainExitError(WasserpathError):
    """A simulated value left the model domain."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"value {value!r} left the model domain at step {step}")


class DensityError(WasserpathError):
    """Density-engine failure: negative density, under-resolved kernel, divergence."""


class ScoreError(WasserpathError):
    """Transition-score evaluation failed."""


class CouplingError(WasserpathError):
    """Coupling construction failed for a path or interval."""
