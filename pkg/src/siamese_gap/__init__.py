"""Siamese-GAP network for KL-0 vs KL-2 knee radiograph classification."""

from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    StateError,
    TrainingDiverged,
    UsageError,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
