"""Smoothness-regularized training and SVD compression of small neural networks."""

from .errors import (ConvergenceError, DataFormatError, DimensionError, NumericError,
                     TrainingDiverged)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DataFormatError",
    "DimensionError",
    "NumericError",
    "TrainingDiverged",
    "__version__",
]
