"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes, hyperparameters or architecture settings are inconsistent."""


class DataError(ValueError):
    """Input data is malformed, missing, or violates a dataset invariant."""


class StateError(RuntimeError):
    """An object was used before it reached the required state."""


class UsageError(RuntimeError):
    """An API was called in a way its contract does not allow."""


class FormatError(ValueError):
    """A serialized file is truncated, corrupt or of an unsupported version."""


class TrainingDiverged(ArithmeticError):
    """A loss or gradient became non-finite during optimization."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
