"""Small-scale ablation studies on a corpus: filtering schemes, QA thresholds, iteration count, data size"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .config import FilterMode, RunConfig
from .core import ClassCatalog, PartialDataset, Split
from .exceptions import InvalidInputError
from .model import SegModel
from .pseudo import PseudoSample
from .qa import assess_features, extract_features
from .selftrain import (
    model_predictor,
    selftrain_loop,
    train_multinets,
    train_stage1,
    validation_scores,
)
from .synth import CorruptionSpec

logger = logging.getLogger(__name__)

Row = Dict[str, object]
STUDIES = ("filtering", "threshold", "iterations", "data_size", "multinets")


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    return config.model_copy(update={"seed": seed})


def _with_stage2(config: RunConfig, **updates) -> RunConfig:
    return config.model_copy(update={"stage2": config.stage2.model_copy(update=updates)})


def filtering_study(
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    seeds: Sequence[int],
    corruption: Optional[CorruptionSpec] = None,
) -> List[Row]:
    """Validation Dice of stage 1 alone, self-training without filtering, and with image-level filtering.

    Both self-training variants see the same pseudo labels: `corruption` (the run
    config's own setting when omitted) is injected before filtering, so the
    unfiltered variant fine-tunes on the damaged samples the filter has to catch.
    """
    corruption = corruption or config.stage2.corruption
    rows: List[Row] = []
    for seed in seeds:
        seeded = _with_seed(config, seed)
        stage1 = train_stage1(seeded, catalog, datasets)
        rows.append({"seed": seed, "scheme": "stage1", "val_dice": stage1.val_dice, "iterations": 0,
                     "corrupted": 0})
        for mode in (FilterMode.NONE, FilterMode.IMAGE):
            variant = _with_stage2(seeded, filtering=mode, corruption=corruption)
            result = selftrain_loop(stage1.state, variant, catalog, datasets, theta0_val=stage1.val_dice)
            rows.append({
                "seed": seed,
                "scheme": f"selftrain_{mode.value}",
                "val_dice": result.best_val_dice,
                "iterations": len(result.records),
                "corrupted": sum(r.corrupted_count for r in result.records),
            })
        logger.info(f"Filtering study seed {seed}: {[r['val_dice'] for r in rows[-3:]]}")
    return rows


def threshold_study(
    model: SegModel,
    pseudo_samples: Sequence[PseudoSample],
    quantiles: Sequence[float] = (0.999, 0.99, 0.95),
    workers: int = 1,
) -> List[Row]:
    """Kept-set size per QA quantile; features are extracted once and rescored per threshold."""
    per_sample = extract_features(pseudo_samples, model, workers)
    sample_ids = [s.sample_id for s in pseudo_samples]
    rows: List[Row] = []
    for quantile in quantiles:
        report = assess_features(sample_ids, per_sample, quantile)
        rows.append({
            "tau_quantile": quantile,
            "threshold": report.threshold,
            "kept_count": report.kept_count,
            "total_count": len(report.verdicts),
            "flagged_labels": len(report.flagged_pairs()),
        })
    return rows


def iteration_study(
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    max_iterations: int = 4,
) -> List[Row]:
    """Validation Dice after every iteration with the plateau rule disabled."""
    stage1 = train_stage1(config, catalog, datasets)
    variant = _with_stage2(config, max_iterations=max_iterations, stop_on_plateau=False)
    result = selftrain_loop(stage1.state, variant, catalog, datasets, theta0_val=stage1.val_dice)
    rows: List[Row] = [{"iteration": 0, "val_dice": stage1.val_dice, "kept_count": None, "total_count": None}]
    for record in result.records:
        rows.append({
            "iteration": record.t,
            "val_dice": record.val_dice_mean,
            "kept_count": record.kept_count,
            "total_count": record.total_count,
        })
    return rows


def subsample_training(datasets: Sequence[PartialDataset], fraction: float) -> List[PartialDataset]:
    """Keep the leading `fraction` of every training split (at least one sample); other splits untouched."""
    if not 0 < fraction <= 1:
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction}")
    result = []
    for dataset in datasets:
        if dataset.split == Split.TRAIN:
            count = max(1, int(round(len(dataset) * fraction)))
            dataset = dataset.with_samples(dataset.samples[:count])
        result.append(dataset)
    return result


def data_size_study(
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    fractions: Sequence[float] = (0.25, 0.5, 1.0),
) -> List[Row]:
    """Stage-1 validation Dice as the training splits shrink to each fraction."""
    rows: List[Row] = []
    for fraction in fractions:
        subset = subsample_training(datasets, fraction)
        train_count = sum(len(d) for d in subset if d.split == Split.TRAIN)
        stage1 = train_stage1(config, catalog, subset)
        rows.append({"fraction": fraction, "train_count": train_count, "val_dice": stage1.val_dice})
    return rows


def multinets_study(
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    seeds: Sequence[int],
    split: Split = Split.VALID,
) -> List[Row]:
    """Grand-mean Dice of the unified stage-1 model against the per-dataset ensemble, same budget."""
    rows: List[Row] = []
    for seed in seeds:
        seeded = _with_seed(config, seed)
        unified = train_stage1(seeded, catalog, datasets)
        ensemble = train_multinets(seeded, catalog, datasets)
        unified_dice, _ = validation_scores(model_predictor(unified.state.model), datasets,
                                            catalog.total_classes, split, config.workers)
        multinets_dice, _ = validation_scores(ensemble.predict, datasets, catalog.total_classes,
                                              split, config.workers)
        rows.append({"seed": seed, "unified_dice": unified_dice, "multinets_dice": multinets_dice})
    return rows


def write_rows(path: Union[str, Path], rows: Sequence[Row]) -> Optional[Path]:
    """Write rows as CSV with None rendered as NA; returns None and writes nothing for no rows."""
    if not rows:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "NA" if row.get(k) is None else row.get(k) for k in columns})
    return path
