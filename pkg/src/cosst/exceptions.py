"""Custom exceptions for the COSST pipeline"""
from typing import Any, Optional


class CosstError(Exception):
    """Base exception for all pipeline errors"""
    pass


class InvalidInputError(CosstError, ValueError):
    """Raised when an array, label map or argument violates a precondition"""
    pass


class RasterFormatError(CosstError):
    """Raised when a GRIDv1 raster cannot be parsed"""
    pass


class ManifestError(CosstError):
    """Raised when a manifest or config document is malformed or references missing files"""
    pass


class CatalogMismatchError(CosstError):
    """Raised when a checkpoint was trained on a different class catalog"""
    pass


class QaError(CosstError):
    """Raised when PCA or distribution fitting preconditions are not met"""
    pass


class PlacementError(CosstError):
    """Raised when synthetic organs cannot be placed without overlap"""
    pass


class TrainingDivergedError(CosstError):
    """Raised when a loss or gradient becomes non-finite.

    `last_state` holds the most recent finite TrainState so callers can
    still persist a checkpoint.
    """

    def __init__(self, message: str, last_state: Optional[Any] = None):
        super().__init__(message)
        self.last_state = last_state


class EmptyFilteredDatasetError(CosstError):
    """Raised when pseudo-label filtering removes every training sample"""

    def __init__(self, message: str, iteration: int = 0, total_count: int = 0):
        super().__init__(message)
        self.iteration = iteration
        self.total_count = total_count
