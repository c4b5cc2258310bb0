"""Pseudo-label generation and the pseudo multi-organ dataset"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .core import ClassCatalog, GridImage, LabelMap, PartialDataset, Split, parallel_map
from .exceptions import InvalidInputError, ManifestError
from .gridio import read_image, read_label, write_image, write_label
from .model import SegModel, predict_probs

logger = logging.getLogger(__name__)

PSEUDO_MANIFEST_KIND = "pseudo"


@dataclass(frozen=True)
class PseudoSample:
    """A training image whose merged label y' covers every class: ground truth first, pseudo labels elsewhere."""

    sample_id: str
    dataset: str
    image: GridImage
    merged_label: LabelMap
    gt_label: LabelMap
    gt_classes: FrozenSet[int]
    pseudo_classes: FrozenSet[int]
    source_iteration: int
    oracle: Optional[LabelMap] = None

    def __post_init__(self) -> None:
        if self.gt_classes & self.pseudo_classes:
            raise InvalidInputError(f"{self.sample_id}: gt and pseudo classes overlap")
        labeled = self.gt_label.labels != 0
        if not np.array_equal(self.merged_label.labels[labeled], self.gt_label.labels[labeled]):
            raise InvalidInputError(f"{self.sample_id}: merged label overrides ground truth")


def argmax_labels(probs: np.ndarray) -> LabelMap:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return LabelMap(np.argmax(np.asarray(probs), axis=0))


def predict_labels(model: SegModel, image: GridImage) -> LabelMap:
    """Argmax labels of the model on one image."""
    return argmax_labels(predict_probs(model, image))


def merge_with_gt(pseudo: LabelMap, gt: LabelMap, annotated: Iterable[int]) -> LabelMap:
    """Ground truth wins; pseudo labels survive only for unannotated classes on unlabeled pixels."""
    if pseudo.shape != gt.shape:
        raise InvalidInputError(f"Pseudo label {pseudo.shape} vs ground truth {gt.shape}")
    annotated = sorted(set(annotated))
    keep_pseudo = (pseudo.labels != 0) & ~np.isin(pseudo.labels, annotated)
    merged = np.where(gt.labels != 0, gt.labels, np.where(keep_pseudo, pseudo.labels, 0))
    return LabelMap(merged)


def build_pseudo_dataset(
    model: SegModel,
    datasets: Sequence[PartialDataset],
    t: int,
    workers: int = 1,
) -> List[PseudoSample]:
    """Pseudo-label every training sample of every dataset with the given model."""
    all_classes = frozenset(range(1, model.num_classes))
    jobs = [
        (dataset, sample)
        for dataset in datasets if dataset.split == Split.TRAIN
        for sample in dataset.samples
    ]

    def _pseudo(job) -> PseudoSample:
        dataset, sample = job
        pseudo = predict_labels(model, sample.image)
        merged = merge_with_gt(pseudo, sample.label, dataset.annotated)
        return PseudoSample(
            sample_id=sample.sample_id,
            dataset=dataset.name,
            image=sample.image,
            merged_label=merged,
            gt_label=sample.label,
            gt_classes=dataset.annotated,
            pseudo_classes=all_classes - dataset.annotated,
            source_iteration=t,
            oracle=sample.oracle,
        )

    samples = parallel_map(_pseudo, jobs, workers)
    logger.info(f"Built pseudo multi-organ dataset for iteration {t}: {len(samples)} samples")
    return samples


class PseudoManifestSample(BaseModel):
    id: str
    dataset: str
    image: str
    label: str
    gt: str
    gt_classes: List[int]
    pseudo_classes: List[int]
    source_iteration: int = Field(ge=0)
    oracle: Optional[str] = None


class PseudoManifest(BaseModel):
    """On-disk index of one pseudo multi-organ dataset"""

    schema_version: Literal[1] = 1
    kind: Literal["pseudo"] = PSEUDO_MANIFEST_KIND
    catalog: List[str]
    samples: List[PseudoManifestSample]


def save_pseudo_dataset(
    samples: Sequence[PseudoSample],
    out_dir: Union[str, Path],
    catalog: ClassCatalog,
) -> Path:
    """Write paired GRIDv1 rasters plus a manifest recording gt/pseudo classes and iteration."""
    out_dir = Path(out_dir)
    entries = []
    for sample in samples:
        stem = f"{sample.dataset}__{sample.sample_id}"
        oracle = None
        if sample.oracle is not None:
            oracle = write_label(out_dir / f"{stem}_oracle.grid", sample.oracle).name
        entries.append(PseudoManifestSample(
            id=sample.sample_id,
            dataset=sample.dataset,
            image=write_image(out_dir / f"{stem}_image.grid", sample.image).name,
            label=write_label(out_dir / f"{stem}_merged.grid", sample.merged_label).name,
            gt=write_label(out_dir / f"{stem}_gt.grid", sample.gt_label).name,
            gt_classes=sorted(sample.gt_classes),
            pseudo_classes=sorted(sample.pseudo_classes),
            source_iteration=sample.source_iteration,
            oracle=oracle,
        ))

    manifest = PseudoManifest(catalog=list(catalog.names), samples=entries)
    path = out_dir / "pseudo_manifest.json"
    path.write_text(manifest.model_dump_json(indent=2, exclude_none=True), encoding="utf-8")
    return path


def load_pseudo_dataset(path: Union[str, Path]) -> Tuple[ClassCatalog, List[PseudoSample]]:
    """Read a pseudo manifest back into (catalog, samples)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Pseudo manifest not found: {path}")
    try:
        manifest = PseudoManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ManifestError(f"{path}: malformed pseudo manifest: {e}") from e

    catalog = ClassCatalog(tuple(manifest.catalog))
    root = path.parent
    samples = [
        PseudoSample(
            sample_id=entry.id,
            dataset=entry.dataset,
            image=read_image(root / entry.image),
            merged_label=read_label(root / entry.label),
            gt_label=read_label(root / entry.gt),
            gt_classes=frozenset(entry.gt_classes),
            pseudo_classes=frozenset(entry.pseudo_classes),
            source_iteration=entry.source_iteration,
            oracle=read_label(root / entry.oracle) if entry.oracle else None,
        )
        for entry in manifest.samples
    ]
    return catalog, samples
