"""Partial-label multi-organ segmentation with quality-filtered self-training"""
from .core import ClassCatalog, GridImage, LabelMap, PartialDataset, ProbMap, Sample, Split
from .exceptions import (
    CatalogMismatchError,
    CosstError,
    EmptyFilteredDatasetError,
    InvalidInputError,
    ManifestError,
    PlacementError,
    QaError,
    RasterFormatError,
    TrainingDivergedError,
)

__all__ = [
    "ClassCatalog",
    "GridImage",
    "LabelMap",
    "PartialDataset",
    "ProbMap",
    "Sample",
    "Split",
    "CosstError",
    "CatalogMismatchError",
    "EmptyFilteredDatasetError",
    "InvalidInputError",
    "ManifestError",
    "PlacementError",
    "QaError",
    "RasterFormatError",
    "TrainingDivergedError",
]
