"""Deterministic synthetic corpus: mutually exclusive geometric organs on 2D grids"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from .core import (
    ClassCatalog,
    GridImage,
    LabelMap,
    PartialDataset,
    Sample,
    Split,
    make_rng,
    parallel_map,
)
from .exceptions import InvalidInputError, PlacementError
from .metrics import dice_binary
from .pseudo import PseudoSample, merge_with_gt

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 10_000
SHRINK_FACTOR = 0.75
SPLIT_ORDER = (Split.TRAIN, Split.VALID, Split.TEST)


class ShapeFamily(str, Enum):
    DISK = "disk"
    ELLIPSE = "ellipse"
    ROUNDED_BAR = "rounded-bar"


class CorruptionKind(str, Enum):
    TRANSLATE_FRACTION = "translate_fraction"
    ERASE_FRACTION = "erase_fraction"
    SWAP_CLASS = "swap_class"


class OrganSpec(BaseModel):
    class_k: int = Field(ge=1)
    name: str
    shape: ShapeFamily = ShapeFamily.DISK
    size: Tuple[float, float] = (5.0, 8.0)
    anchor: Tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    intensity_mean: float = 1.0
    intensity_std: float = 0.2

    @field_validator("size")
    @classmethod
    def _size_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 < value[0] <= value[1]:
            raise ValueError(f"size range must satisfy 0 < min <= max, got {value}")
        return value

    @field_validator("anchor")
    @classmethod
    def _anchor_box(cls, value: Tuple[float, float, float, float]) -> Tuple[float, float, float, float]:
        y0, x0, y1, x1 = value
        if not (0 <= y0 <= y1 <= 1 and 0 <= x0 <= x1 <= 1):
            raise ValueError(f"anchor must be a (y0, x0, y1, x1) box inside [0, 1], got {value}")
        return value


class SceneSpec(BaseModel):
    height: int = Field(64, ge=8)
    width: int = Field(64, ge=8)
    organs: List[OrganSpec]
    background_mean: float = 0.0
    background_std: float = 0.2
    seed: int = 0

    @model_validator(mode="after")
    def _contiguous_classes(self) -> "SceneSpec":
        classes = sorted(o.class_k for o in self.organs)
        if classes != list(range(1, len(classes) + 1)):
            raise ValueError(f"organ classes must be exactly 1..{len(classes)}, got {classes}")
        if len({o.name for o in self.organs}) != len(self.organs):
            raise ValueError("organ names must be unique")
        return self

    def catalog(self) -> ClassCatalog:
        return ClassCatalog(tuple(o.name for o in sorted(self.organs, key=lambda o: o.class_k)))


class CorruptionSpec(BaseModel):
    kind: CorruptionKind = CorruptionKind.TRANSLATE_FRACTION
    magnitude: float = Field(0.25, ge=0.0)
    fraction: float = Field(0.2, ge=0.0, le=1.0)
    seed: int = 0


@dataclass(frozen=True)
class CorruptionRecord:
    sample_id: str
    class_k: int
    achieved_dice: float


def reference_scene_spec(seed: int = 0) -> SceneSpec:
    """The 64x64, four-organ "mini-bowel" scene."""
    return SceneSpec(
        height=64,
        width=64,
        seed=seed,
        background_mean=0.0,
        background_std=0.2,
        organs=[
            OrganSpec(class_k=1, name="duodenum", shape=ShapeFamily.ROUNDED_BAR, size=(7, 10),
                      anchor=(0.15, 0.15, 0.45, 0.45), intensity_mean=1.0, intensity_std=0.2),
            OrganSpec(class_k=2, name="small_bowel", shape=ShapeFamily.DISK, size=(6, 8),
                      anchor=(0.15, 0.55, 0.45, 0.85), intensity_mean=1.5, intensity_std=0.2),
            OrganSpec(class_k=3, name="colon", shape=ShapeFamily.ELLIPSE, size=(7, 10),
                      anchor=(0.55, 0.15, 0.85, 0.45), intensity_mean=2.0, intensity_std=0.2),
            OrganSpec(class_k=4, name="sigmoid", shape=ShapeFamily.DISK, size=(5, 7),
                      anchor=(0.55, 0.55, 0.85, 0.85), intensity_mean=2.5, intensity_std=0.2),
        ],
    )


REFERENCE_PARTITION = ((1, 2), (3, 4))
REFERENCE_NAMES = ("bowel_a", "bowel_b")


def _shape_mask(organ: OrganSpec, center: Tuple[float, float], size: float, angle: float,
                aspect: float, grid: Tuple[int, int]) -> np.ndarray:
    yy, xx = np.mgrid[0:grid[0], 0:grid[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    if organ.shape == ShapeFamily.DISK:
        return dx ** 2 + dy ** 2 <= size ** 2
    if organ.shape == ShapeFamily.ELLIPSE:
        return (u / size) ** 2 + (v / (size * aspect)) ** 2 <= 1.0
    radius = size * 0.45
    along = u - np.clip(u, -size, size)
    return along ** 2 + v ** 2 <= radius ** 2


def _place_organs(spec: SceneSpec, rng: np.random.Generator, scale: float) -> Optional[np.ndarray]:
    grid = (spec.height, spec.width)
    oracle = np.zeros(grid, dtype=np.int64)
    for organ in sorted(spec.organs, key=lambda o: o.class_k):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            y0, x0, y1, x1 = organ.anchor
            center = (rng.uniform(y0, y1) * spec.height, rng.uniform(x0, x1) * spec.width)
            size = rng.uniform(*organ.size) * scale
            mask = _shape_mask(organ, center, size, rng.uniform(0, np.pi), rng.uniform(0.5, 0.8), grid)
            touches_border = mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
            if mask.any() and not touches_border and not (oracle[mask] != 0).any():
                oracle[mask] = organ.class_k
                break
        else:
            return None
    return oracle


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> Tuple[GridImage, LabelMap]:
    """Place every organ without overlap and texture the image; returns (image, full labels)."""
    oracle = _place_organs(spec, rng, 1.0)
    if oracle is None:
        logger.warning(f"Organ placement failed after {MAX_PLACEMENT_ATTEMPTS} attempts, shrinking sizes")
        oracle = _place_organs(spec, rng, SHRINK_FACTOR)
    if oracle is None:
        raise PlacementError("Could not place non-overlapping organs even after shrinking sizes")

    image = rng.normal(spec.background_mean, spec.background_std, size=oracle.shape)
    for organ in spec.organs:
        mask = oracle == organ.class_k
        image[mask] = rng.normal(organ.intensity_mean, organ.intensity_std, size=int(mask.sum()))
    # stored as f32 on disk, so keep in-memory values f32-exact
    return GridImage(image.astype(np.float32).astype(np.float64)[None]), LabelMap(oracle)


def _split_counts(n_samples: int, fractions: Sequence[float]) -> List[int]:
    n_train = int(round(n_samples * fractions[0]))
    n_valid = int(round(n_samples * fractions[1]))
    return [n_train, n_valid, n_samples - n_train - n_valid]


def generate_corpus(
    spec: SceneSpec,
    n_samples: int,
    partition: Sequence[Sequence[int]],
    split_fractions: Sequence[float] = (0.6, 0.2, 0.2),
    names: Optional[Sequence[str]] = None,
    workers: int = 1,
) -> List[PartialDataset]:
    """Render `n_samples` scenes per partially labeled dataset, split train/valid/test.

    Every image contains every organ; visible labels keep only the dataset's
    annotated classes and the full labels ride along as each sample's oracle.
    """
    catalog = spec.catalog()
    covered = set().union(*[set(p) for p in partition]) if partition else set()
    if covered != set(catalog.all_classes):
        raise InvalidInputError(f"Partition covers {sorted(covered)}, catalog has {sorted(catalog.all_classes)}")
    if abs(sum(split_fractions) - 1.0) > 1e-9 or len(split_fractions) != 3:
        raise InvalidInputError(f"Split fractions must be three values summing to 1, got {split_fractions}")
    names = list(names) if names else [f"ds{i + 1}" for i in range(len(partition))]
    if len(names) != len(partition):
        raise InvalidInputError("One dataset name is needed per partition subset")

    datasets: List[PartialDataset] = []
    for index, (name, annotated) in enumerate(zip(names, partition)):
        annotated = frozenset(annotated)

        def _render(j: int, index=index, name=name, annotated=annotated) -> Sample:
            image, oracle = render_scene(spec, make_rng(spec.seed, index, j))
            return Sample(f"{name}_{j:04d}", image, oracle.restrict(annotated), oracle)

        samples = parallel_map(_render, list(range(n_samples)), workers)
        start = 0
        for split, count in zip(SPLIT_ORDER, _split_counts(n_samples, split_fractions)):
            datasets.append(PartialDataset(name, tuple(samples[start:start + count]), annotated, split))
            start += count
        logger.info(f"Generated dataset {name} annotated {sorted(annotated)}: {n_samples} samples")
    return datasets


def _directional_order(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    coords = np.argwhere(mask)
    angle = rng.uniform(0, 2 * np.pi)
    projection = coords @ np.array([np.sin(angle), np.cos(angle)])
    return coords[np.argsort(projection, kind="stable")[::-1]]


def corrupt_pseudo(
    labels: LabelMap,
    spec: CorruptionSpec,
    class_k: int,
    num_classes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[LabelMap, float]:
    """Damage one class of a label map; returns the new map and its Dice against the original class mask."""
    original = labels.labels == class_k
    if not original.any():
        raise InvalidInputError(f"Class {class_k} is absent; nothing to corrupt")
    rng = rng if rng is not None else make_rng(spec.seed, class_k)
    out = labels.labels.copy()

    if spec.magnitude > 0:
        if spec.kind == CorruptionKind.TRANSLATE_FRACTION:
            shift = int(round(spec.magnitude * max(labels.shape)))
            dy, dx = [(shift, 0), (-shift, 0), (0, shift), (0, -shift)][int(rng.integers(4))]
            moved = np.zeros_like(original)
            h, w = labels.shape
            src = original[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            moved[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
            out[original] = 0
            out[moved] = class_k
        else:
            ordered = _directional_order(original, rng)
            count = int(np.ceil(min(spec.magnitude, 1.0) * len(ordered)))
            chosen = ordered[:count]
            if spec.kind == CorruptionKind.ERASE_FRACTION:
                out[chosen[:, 0], chosen[:, 1]] = 0
            else:
                if num_classes is None or num_classes < 2:
                    raise InvalidInputError("swap_class needs at least two organ classes")
                others = [k for k in range(1, num_classes + 1) if k != class_k]
                out[chosen[:, 0], chosen[:, 1]] = int(rng.choice(others))

    corrupted = LabelMap(out)
    return corrupted, dice_binary(corrupted.labels == class_k, original)


def inject_corruption(
    pseudo_samples: Sequence[PseudoSample],
    spec: CorruptionSpec,
    num_classes: int,
) -> Tuple[List[PseudoSample], List[CorruptionRecord]]:
    """Corrupt every pseudo class of a seeded fraction of samples, keeping ground truth intact."""
    rng = make_rng(spec.seed, 0xBAD)
    n_target = int(round(spec.fraction * len(pseudo_samples)))
    targets = set(rng.choice(len(pseudo_samples), size=n_target, replace=False).tolist()) if n_target else set()

    result: List[PseudoSample] = []
    records: List[CorruptionRecord] = []
    for index, sample in enumerate(pseudo_samples):
        if index not in targets:
            result.append(sample)
            continue
        merged = sample.merged_label
        present = sorted(sample.pseudo_classes & merged.classes_present())
        for k in present:
            if not (merged.labels == k).any():
                continue
            damaged, _ = corrupt_pseudo(merged, spec, k, num_classes, make_rng(spec.seed, index, k))
            merged = merge_with_gt(damaged, sample.gt_label, sample.gt_classes)
        for k in present:
            dice = dice_binary(merged.labels == k, sample.merged_label.labels == k)
            records.append(CorruptionRecord(sample.sample_id, k, dice))
        result.append(PseudoSample(
            sample.sample_id, sample.dataset, sample.image, merged, sample.gt_label,
            sample.gt_classes, sample.pseudo_classes, sample.source_iteration, sample.oracle,
        ))

    if records:
        mean_dice = float(np.mean([r.achieved_dice for r in records]))
        logger.info(f"Corrupted {len(targets)} samples ({len(records)} pseudo labels), mean Dice {mean_dice:.3f}")
        if mean_dice >= 0.5:
            logger.warning(f"Corruption magnitude {spec.magnitude} leaves mean Dice {mean_dice:.3f} >= 0.5")
    return result, records


def oracle_pseudo_dataset(datasets: Sequence[PartialDataset], t: int = 0) -> List[PseudoSample]:
    """Pseudo samples whose pseudo labels are the hidden full labels (perfect pseudo labels)."""
    samples = []
    for dataset in datasets:
        if dataset.split != Split.TRAIN:
            continue
        all_classes = frozenset()
        for sample in dataset.samples:
            if sample.oracle is None:
                raise InvalidInputError(f"Sample {sample.sample_id} has no hidden full labels")
            all_classes = all_classes | sample.oracle.classes_present()
        for sample in dataset.samples:
            samples.append(PseudoSample(
                sample.sample_id, dataset.name, sample.image,
                merge_with_gt(sample.oracle, sample.label, dataset.annotated),
                sample.label, dataset.annotated, all_classes - dataset.annotated, t, sample.oracle,
            ))
    return samples


def corruption_summary(records: Sequence[CorruptionRecord]) -> Dict[str, object]:
    """Count and mean achieved Dice of the injected corruptions, plus one entry per record."""
    return {
        "count": len(records),
        "mean_dice": float(np.mean([r.achieved_dice for r in records])) if records else None,
        "records": [
            {"sample_id": r.sample_id, "class": r.class_k, "dice": r.achieved_dice} for r in records
        ],
    }
