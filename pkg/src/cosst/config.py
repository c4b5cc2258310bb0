"""Pydantic models for run configs, dataset manifests and corpus generation specs"""
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .core import ClassCatalog, PartialDataset, Sample, Split
from .exceptions import CatalogMismatchError, InvalidInputError, ManifestError, RasterFormatError
from .gridio import read_image, read_label, write_image, write_label
from .synth import CorruptionSpec, SceneSpec

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ModelT = TypeVar("ModelT", bound=BaseModel)


class FilterMode(str, Enum):
    """Pseudo-label filtering applied before fine-tuning"""
    NONE = "none"
    IMAGE = "image"


class FinetuneOrigin(str, Enum):
    """Which weights each self-training iteration fine-tunes from"""
    THETA0 = "theta0"
    PREVIOUS = "previous"


class ModelConfig(BaseModel):
    m: int = Field(8, ge=2)
    hidden: int = Field(8, ge=1)
    kernel_size: int = Field(3, ge=1)

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 != 1:
            raise ValueError("kernel_size must be odd")
        return value


class AugmentConfig(BaseModel):
    hflip: bool = False
    noise_std: float = Field(0.0, ge=0.0)


class Stage1Config(BaseModel):
    base_lr: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.99, ge=0.0, lt=1.0)
    max_epochs: int = Field(1000, ge=0)
    batch_size: int = Field(4, ge=1)
    eval_every: int = Field(5, ge=1)
    seed: int = 0
    marginal_weight: float = Field(1.0, ge=0.0)
    exclusion_weight: float = Field(1.0, ge=0.0)


class Stage2Config(BaseModel):
    lr: float = Field(0.0001, gt=0.0)
    momentum: float = Field(0.99, ge=0.0, lt=1.0)
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(4, ge=1)
    eval_every: int = Field(5, ge=1)
    max_iterations: int = Field(3, ge=0)
    plateau_delta: float = Field(0.001, ge=0.0)
    stop_on_plateau: bool = True
    tau_quantile: float = Field(0.999, gt=0.0, lt=1.0)
    filtering: FilterMode = FilterMode.IMAGE
    finetune_origin: FinetuneOrigin = FinetuneOrigin.THETA0
    corruption: Optional[CorruptionSpec] = None


class RunConfig(BaseModel):
    """Everything a train/selftrain run needs; manifest paths resolve against the config file."""

    schema_version: Literal[1] = SCHEMA_VERSION
    datasets: List[str]
    seed: int = 0
    workers: int = Field(1, ge=1)
    model: ModelConfig = Field(default_factory=ModelConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    stage2: Stage2Config = Field(default_factory=Stage2Config)

    @field_validator("datasets")
    @classmethod
    def _some_datasets(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one dataset manifest is required")
        return value


class ManifestSample(BaseModel):
    id: str
    image: str
    label: str
    oracle: Optional[str] = None


class ManifestDataset(BaseModel):
    name: str
    annotated: List[int]
    split: Split
    samples: List[ManifestSample]


class Manifest(BaseModel):
    schema_version: Literal[1] = SCHEMA_VERSION
    catalog: List[str]
    datasets: List[ManifestDataset]

    @model_validator(mode="after")
    def _annotated_in_catalog(self) -> "Manifest":
        valid = set(range(1, len(self.catalog) + 1))
        for dataset in self.datasets:
            if not dataset.annotated or not set(dataset.annotated) <= valid:
                raise ValueError(
                    f"dataset {dataset.name}: annotated {dataset.annotated} not a subset of 1..{len(self.catalog)}"
                )
        return self


class GenerateSpec(BaseModel):
    """Input document of `cosst generate`"""

    schema_version: Literal[1] = SCHEMA_VERSION
    scene: SceneSpec
    n_samples: int = Field(40, ge=1)
    partition: List[List[int]]
    names: Optional[List[str]] = None
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    corruption: Optional[CorruptionSpec] = None
    workers: int = Field(1, ge=1)


def load_json_model(path: Union[str, Path], model_cls: Type[ModelT]) -> ModelT:
    """Parse a JSON document into `model_cls`. Validation errors propagate unchanged."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{model_cls.__name__} file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON: {e}") from e
    return model_cls.model_validate(data)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Load a RunConfig; relative manifest paths become absolute against the config's folder."""
    path = Path(path)
    config = load_json_model(path, RunConfig)
    base = path.resolve().parent
    resolved = [str(p if Path(p).is_absolute() else (base / p).resolve()) for p in config.datasets]
    return config.model_copy(update={"datasets": resolved})


def load_manifest(path: Union[str, Path]) -> Manifest:
    """Load and validate a corpus manifest; any schema problem becomes a ManifestError."""
    try:
        return load_json_model(path, Manifest)
    except ValidationError as e:
        raise ManifestError(f"{path}: invalid manifest: {e}") from e


def load_datasets(
    manifest_paths: Sequence[Union[str, Path]],
    splits: Optional[Sequence[Split]] = None,
) -> Tuple[ClassCatalog, List[PartialDataset]]:
    """Read every manifest into PartialDatasets. All manifests must share one catalog."""
    catalog: Optional[ClassCatalog] = None
    datasets: List[PartialDataset] = []
    for manifest_path in manifest_paths:
        manifest_path = Path(manifest_path)
        manifest = load_manifest(manifest_path)
        current = ClassCatalog(tuple(manifest.catalog))
        if catalog is None:
            catalog = current
        elif current.names != catalog.names:
            raise CatalogMismatchError(
                f"{manifest_path}: catalog {list(current.names)} differs from {list(catalog.names)}"
            )

        root = manifest_path.parent
        for entry in manifest.datasets:
            if splits is not None and entry.split not in splits:
                continue
            try:
                samples = []
                for s in entry.samples:
                    label = read_label(root / s.label)
                    label.validate(catalog)
                    oracle = read_label(root / s.oracle) if s.oracle else None
                    samples.append(Sample(s.id, read_image(root / s.image), label, oracle))
                datasets.append(PartialDataset(entry.name, tuple(samples), frozenset(entry.annotated), entry.split))
            except (FileNotFoundError, RasterFormatError, InvalidInputError) as e:
                raise ManifestError(f"{manifest_path}: dataset {entry.name}/{entry.split.value}: {e}") from e
        logger.info(f"Loaded manifest {manifest_path.name}: {len(manifest.datasets)} dataset splits")

    if catalog is None:
        raise ManifestError("No manifests given")
    return catalog, datasets


def write_manifests(
    datasets: Sequence[PartialDataset],
    catalog: ClassCatalog,
    out_dir: Union[str, Path],
) -> List[Path]:
    """One manifest per dataset name, with rasters under <name>/<split>/."""
    out_dir = Path(out_dir)
    grouped: Dict[str, List[PartialDataset]] = {}
    for dataset in datasets:
        grouped.setdefault(dataset.name, []).append(dataset)

    paths = []
    for name, parts in grouped.items():
        entries = []
        for part in parts:
            folder = Path(name) / part.split.value
            samples = []
            for sample in part.samples:
                image = folder / f"{sample.sample_id}_image.grid"
                label = folder / f"{sample.sample_id}_label.grid"
                write_image(out_dir / image, sample.image)
                write_label(out_dir / label, sample.label)
                oracle = None
                if sample.oracle is not None:
                    oracle = folder / f"{sample.sample_id}_oracle.grid"
                    write_label(out_dir / oracle, sample.oracle)
                samples.append(ManifestSample(
                    id=sample.sample_id,
                    image=image.as_posix(),
                    label=label.as_posix(),
                    oracle=oracle.as_posix() if oracle else None,
                ))
            entries.append(ManifestDataset(
                name=name, annotated=sorted(part.annotated), split=part.split, samples=samples,
            ))
        manifest = Manifest(catalog=list(catalog.names), datasets=entries)
        path = out_dir / f"{name}_manifest.json"
        path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
        paths.append(path)
        logger.info(f"Wrote manifest: {path}")
    return paths
