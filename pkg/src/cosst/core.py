"""Domain types shared by every stage: rasters, datasets and class bookkeeping"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, FrozenSet, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6

T = TypeVar("T")
R = TypeVar("R")


class Split(str, Enum):
    """Dataset split"""
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


def _readonly(array: np.ndarray, dtype) -> np.ndarray:
    arr = np.array(array, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridImage:
    """Intensity raster stored as (channels, height, width) float64 planes."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.size == 0:
            raise InvalidInputError(f"GridImage expects (channels, height, width), got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("GridImage values must be finite")
        object.__setattr__(self, "values", _readonly(values, np.float64))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class LabelMap:
    """Integer class raster; 0 is background, k >= 1 is organ k."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise InvalidInputError(f"LabelMap expects (height, width), got shape {labels.shape}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise InvalidInputError("LabelMap values must be integers")
        if labels.min() < 0:
            raise InvalidInputError("LabelMap values must be >= 0")
        object.__setattr__(self, "labels", _readonly(labels, np.int64))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def classes_present(self) -> FrozenSet[int]:
        return frozenset(int(k) for k in np.unique(self.labels) if k != 0)

    def restrict(self, classes: Iterable[int]) -> "LabelMap":
        """Keep only the given classes; every other label becomes background."""
        keep = np.isin(self.labels, sorted(set(classes)))
        return LabelMap(np.where(keep, self.labels, 0))

    def validate(self, catalog: "ClassCatalog") -> None:
        """Reject labels beyond the catalog size."""
        if int(self.labels.max()) > catalog.total_classes:
            raise InvalidInputError(
                f"Label {int(self.labels.max())} exceeds catalog size {catalog.total_classes}"
            )


@dataclass(frozen=True)
class ClassCatalog:
    """Organ class names; names[i] is class index i + 1."""

    names: Tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        if len(names) < 1:
            raise InvalidInputError("ClassCatalog needs at least one organ class")
        if len(set(names)) != len(names):
            raise InvalidInputError(f"ClassCatalog names must be unique: {names}")
        object.__setattr__(self, "names", names)

    @property
    def total_classes(self) -> int:
        return len(self.names)

    @property
    def num_channels(self) -> int:
        return 1 + len(self.names)

    @property
    def all_classes(self) -> FrozenSet[int]:
        return frozenset(range(1, len(self.names) + 1))

    def name_of(self, k: int) -> str:
        """Class name for a global index, 0 being background."""
        return "background" if k == 0 else self.names[k - 1]


@dataclass(frozen=True)
class Sample:
    """One image with its visible labels and, for synthetic data, the hidden full labels."""

    sample_id: str
    image: GridImage
    label: LabelMap
    oracle: Optional[LabelMap] = None

    def __post_init__(self) -> None:
        if self.image.shape != self.label.shape:
            raise InvalidInputError(
                f"Sample {self.sample_id}: image {self.image.shape} vs label {self.label.shape}"
            )
        if self.oracle is not None and self.oracle.shape != self.label.shape:
            raise InvalidInputError(f"Sample {self.sample_id}: oracle shape mismatch")


@dataclass(frozen=True)
class PartialDataset:
    """Samples of one split of a dataset in which only `annotated` organs are labeled."""

    name: str
    samples: Tuple[Sample, ...]
    annotated: FrozenSet[int]
    split: Split = Split.TRAIN

    def __post_init__(self) -> None:
        annotated = frozenset(int(k) for k in self.annotated)
        if not annotated:
            raise InvalidInputError(f"Dataset {self.name}: annotated class set is empty")
        if min(annotated) < 1:
            raise InvalidInputError(f"Dataset {self.name}: annotated classes must be >= 1")
        samples = tuple(self.samples)
        for sample in samples:
            extra = sample.label.classes_present() - annotated
            if extra:
                raise InvalidInputError(
                    f"Dataset {self.name}: sample {sample.sample_id} labels unannotated classes {sorted(extra)}"
                )
        object.__setattr__(self, "annotated", annotated)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "split", Split(self.split))

    def __len__(self) -> int:
        return len(self.samples)

    def with_samples(self, samples: Sequence[Sample]) -> "PartialDataset":
        """Same dataset metadata over a different sample list."""
        return PartialDataset(self.name, tuple(samples), self.annotated, self.split)


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities stored as (classes, height, width)."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise InvalidInputError(f"ProbMap expects (classes, height, width), got shape {probs.shape}")
        if probs.min() < -SIMPLEX_TOL or probs.max() > 1 + SIMPLEX_TOL:
            raise InvalidInputError("ProbMap probabilities must lie in [0, 1]")
        if np.abs(probs.sum(axis=0) - 1.0).max() > SIMPLEX_TOL:
            raise InvalidInputError("ProbMap planes must sum to 1 at every pixel")
        object.__setattr__(self, "probs", _readonly(probs, np.float64))

    @property
    def classes(self) -> int:
        return self.probs.shape[0]

    @property
    def height(self) -> int:
        return self.probs.shape[1]

    @property
    def width(self) -> int:
        return self.probs.shape[2]


def union_mask(label: LabelMap) -> np.ndarray:
    """Union of every labeled organ: True where the label is not background."""
    return label.labels != 0


def class_pixel_count(label: LabelMap, k: int) -> int:
    """Pixels of class k in one label map."""
    if k < 1:
        raise InvalidInputError(f"Class index must be >= 1, got {k}")
    return int(np.count_nonzero(label.labels == k))


def one_hot(labels: np.ndarray, num_channels: int) -> np.ndarray:
    """(H, W) integer labels -> (num_channels, H, W) float64 indicator planes."""
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) >= num_channels:
        raise InvalidInputError(f"Label {int(labels.max())} outside {num_channels} channels")
    return (np.arange(num_channels)[:, None, None] == labels[None]).astype(np.float64)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator derived from a run seed and any number of integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Map `fn` over `items`, optionally on a thread pool. Result order always follows `items`."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
