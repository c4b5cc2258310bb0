"""Two-stage training: partial-label stage 1, then iterated pseudo-label self-training.

Stage 1 trains one unified model on every partially labeled dataset with the
marginal and exclusion losses. Each self-training iteration pseudo-labels the
training images with the previous model, filters unreliable samples and
fine-tunes (from the stage-1 weights by default) on the merged labels. The
best validation checkpoint across all iterations is returned.
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from .config import FilterMode, FinetuneOrigin, RunConfig
from .core import ClassCatalog, GridImage, LabelMap, PartialDataset, Split, make_rng, parallel_map
from .exceptions import EmptyFilteredDatasetError, InvalidInputError, ManifestError, TrainingDivergedError
from .losses import LOSS_CSV_COLUMNS, LossReport, fulllabel_loss, stage1_loss
from .metrics import evaluate_labels, summarize
from .model import (
    Params,
    SegModel,
    Stage,
    TrainState,
    forward_backward,
    load_checkpoint,
    predict_probs,
    save_checkpoint,
    sgd_step,
)
from .pseudo import PseudoSample, argmax_labels, build_pseudo_dataset, save_pseudo_dataset
from .qa import assess, filter_dataset, write_qa_report
from .synth import inject_corruption

logger = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray], Tuple[LossReport, np.ndarray]]
Predictor = Callable[[GridImage], LabelMap]

STATUS_COMPLETED = "completed"
STATUS_SKIPPED = "skipped"
STOP_PLATEAU = "plateau"
STOP_MAX_ITERATIONS = "max_iterations"
STOP_EMPTY_FILTERED = "empty_filtered"


@dataclass(frozen=True)
class TrainItem:
    """One training image with its target and the loss that scores a prediction against it"""
    sample_id: str
    image: GridImage
    labels: np.ndarray
    make_loss: Callable[[np.ndarray], LossFn]


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    loss: LossReport
    val_dice: Optional[float] = None


@dataclass
class TrainResult:
    state: TrainState
    val_dice: Optional[float]
    val_asd: Optional[float]
    best_epoch: int
    history: List[EpochRecord] = field(default_factory=list)


class IterationRecord(BaseModel):
    """Outcome of one self-training iteration"""

    t: int = Field(ge=1)
    kept_count: int = Field(ge=0)
    total_count: int = Field(ge=0)
    val_dice_mean: Optional[float] = None
    val_asd_mean: Optional[float] = None
    checkpoint_ref: Optional[str] = None
    status: Literal["completed", "skipped"] = STATUS_COMPLETED
    finetuned_from: str = "theta_0"
    corrupted_count: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _kept_within_total(self) -> "IterationRecord":
        if self.kept_count > self.total_count:
            raise ValueError(f"iteration {self.t}: kept {self.kept_count} > total {self.total_count}")
        return self


class IterationLog(BaseModel):
    """iterations.json: the records so far and, once the loop has ended, why it stopped"""

    schema_version: Literal[1] = 1
    stop_reason: Optional[Literal["plateau", "max_iterations", "empty_filtered"]] = None
    records: List[IterationRecord] = Field(default_factory=list)


@dataclass
class SelfTrainResult:
    state: TrainState
    best_iteration: int
    best_val_dice: Optional[float]
    records: List[IterationRecord]
    stop_reason: str


def _dice_value(value: Optional[float]) -> float:
    return -np.inf if value is None else value


def model_predictor(model: SegModel) -> Predictor:
    """Wrap a model as an image-to-probabilities callable."""
    return lambda image: argmax_labels(predict_probs(model, image))


def validation_scores(
    predict: Predictor,
    datasets: Sequence[PartialDataset],
    num_classes: int,
    split: Split = Split.VALID,
    workers: int = 1,
) -> Tuple[Optional[float], Optional[float]]:
    """Grand mean Dice and ASD over the given split, scoring annotated classes only."""
    jobs = [(d, s) for d in datasets if d.split == split for s in d.samples]
    if not jobs:
        return None, None

    def _score(job):
        dataset, sample = job
        return evaluate_labels(sample.sample_id, predict(sample.image), sample.label,
                               dataset.annotated, num_classes, dataset.name)

    rows = [row for rows in parallel_map(_score, jobs, workers) for row in rows]
    summary = summarize(rows, num_classes)
    return summary.grand_dice, summary.grand_asd


def _augment(item: TrainItem, augment, rng: np.random.Generator) -> Tuple[GridImage, np.ndarray]:
    values = item.image.values
    labels = item.labels
    if augment.hflip and rng.random() < 0.5:
        values = values[:, :, ::-1]
        labels = labels[:, ::-1]
    if augment.noise_std > 0:
        values = values + rng.normal(0.0, augment.noise_std, size=values.shape)
    if values is item.image.values:
        return item.image, labels
    return GridImage(values), np.ascontiguousarray(labels)


def _write_loss_rows(path: Optional[Path], history: Sequence[EpochRecord]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CSV_COLUMNS + ("val_dice",))
        for record in history:
            val = "NA" if record.val_dice is None else repr(record.val_dice)
            writer.writerow(record.loss.csv_row(record.epoch, record.stage) + [val])


def run_epochs(
    state: TrainState,
    items: Sequence[TrainItem],
    evaluate: Callable[[SegModel], Tuple[Optional[float], Optional[float]]],
    config: RunConfig,
    batch_size: int,
    eval_every: int,
    loss_csv: Optional[Path] = None,
) -> TrainResult:
    """Mini-batch Nesterov SGD over `items` until the schedule ends; keeps the best validation state.

    The starting weights are scored too, so zero epochs returns them unchanged.
    """
    if not items and state.max_epochs > 0:
        raise InvalidInputError("No training samples")

    stage = state.stage.value
    best_dice, best_asd = evaluate(state.model)
    best = TrainResult(state, best_dice, best_asd, state.epoch)
    history: List[EpochRecord] = []

    while state.epoch < state.max_epochs:
        epoch = state.epoch
        rng = make_rng(state.rng_seed, 0 if state.stage == Stage.INITIAL else 1, epoch)
        order = rng.permutation(len(items))
        reports: List[LossReport] = []
        for start in range(0, len(order), batch_size):
            batch = [items[i] for i in order[start:start + batch_size]]
            grads: Optional[Params] = None
            for item in batch:
                image, labels = _augment(item, config.augment, rng)
                report, sample_grads = forward_backward(state.model, image, item.make_loss(labels))
                if not np.isfinite(report.total):
                    raise TrainingDivergedError(
                        f"Non-finite {stage} loss on {item.sample_id} at epoch {epoch}", state
                    )
                reports.append(report)
                if grads is None:
                    grads = sample_grads
                else:
                    grads = {name: grads[name] + sample_grads[name] for name in grads}
            state = sgd_step(state, {name: g / len(batch) for name, g in grads.items()})

        state = state.next_epoch()
        mean = LossReport.mean(reports)
        record = EpochRecord(state.epoch, stage, mean)
        logger.debug(
            f"[{stage}] epoch {state.epoch}/{state.max_epochs} loss {mean.total:.4f} "
            f"(marginal {mean.marginal_term:.4f}, exclusion {mean.exclusion_term:.4f})"
        )
        if mean.saturated:
            logger.debug(f"[{stage}] epoch {state.epoch}: cross-entropy clamped on some pixels")

        if state.epoch % eval_every == 0 or state.epoch == state.max_epochs:
            val_dice, val_asd = evaluate(state.model)
            record.val_dice = val_dice
            logger.info(f"[{stage}] epoch {state.epoch}/{state.max_epochs} loss {mean.total:.4f} val Dice {val_dice}")
            if _dice_value(val_dice) > _dice_value(best.val_dice):
                best = TrainResult(state, val_dice, val_asd, state.epoch)
        history.append(record)

    best.history = history
    _write_loss_rows(loss_csv, history)
    return best


def stage1_items(datasets: Sequence[PartialDataset], config: RunConfig) -> List[TrainItem]:
    """Training-split items, each scored against its own dataset's annotated classes."""
    items = []
    for dataset in datasets:
        if dataset.split != Split.TRAIN:
            continue
        annotated = dataset.annotated

        def make_loss(labels: np.ndarray, annotated=annotated) -> LossFn:
            return lambda probs: stage1_loss(probs, labels, annotated,
                                             config.stage1.marginal_weight, config.stage1.exclusion_weight)

        for sample in dataset.samples:
            items.append(TrainItem(sample.sample_id, sample.image, sample.label.labels, make_loss))
    return items


def pseudo_items(samples: Sequence[PseudoSample]) -> List[TrainItem]:
    def make_loss(labels: np.ndarray) -> LossFn:
        return lambda probs: fulllabel_loss(probs, labels)

    return [TrainItem(s.sample_id, s.image, s.merged_label.labels, make_loss) for s in samples]


def initial_model(config: RunConfig, catalog: ClassCatalog, in_channels: int, num_classes: Optional[int] = None,
                  seed_key: int = 0) -> SegModel:
    """Fresh stage-1 model sized for the catalog."""
    return SegModel.initialize(
        in_channels,
        num_classes or catalog.num_channels,
        config.model.m,
        config.model.hidden,
        config.model.kernel_size,
        seed=config.stage1.seed * 1000 + config.seed + seed_key,
    )


def _in_channels(datasets: Sequence[PartialDataset]) -> int:
    for dataset in datasets:
        for sample in dataset.samples:
            return sample.image.channels
    raise InvalidInputError("Datasets contain no samples")


def train_stage1(
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    loss_csv: Optional[Path] = None,
) -> TrainResult:
    """Train the unified model on every partially labeled dataset; returns theta_0."""
    for dataset in datasets:
        if not dataset.annotated <= catalog.all_classes:
            raise InvalidInputError(f"Dataset {dataset.name} annotates classes outside the catalog")

    model = initial_model(config, catalog, _in_channels(datasets))
    state = TrainState.fresh(
        model, config.stage1.base_lr, config.stage1.max_epochs, Stage.INITIAL,
        rng_seed=config.seed, momentum=config.stage1.momentum, origin="init",
    )
    items = stage1_items(datasets, config)
    logger.info(f"Stage 1: {len(items)} training images, {config.stage1.max_epochs} epochs")

    def evaluate(m: SegModel):
        return validation_scores(model_predictor(m), datasets, catalog.total_classes, workers=config.workers)

    result = run_epochs(state, items, evaluate, config, config.stage1.batch_size, config.stage1.eval_every, loss_csv)
    logger.info(f"Stage 1 done: best val Dice {result.val_dice} at epoch {result.best_epoch}")
    return result


def finetune(
    origin: TrainState,
    origin_name: str,
    samples: Sequence[PseudoSample],
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    t: int,
    loss_csv: Optional[Path] = None,
) -> TrainResult:
    """Fine-tune a copy of `origin` on pseudo multi-organ samples with the full-label loss."""
    state = TrainState.fresh(
        origin.model, config.stage2.lr, config.stage2.epochs, Stage.FINETUNE,
        rng_seed=config.seed * 1000 + t, momentum=config.stage2.momentum, origin=origin_name,
    )

    def evaluate(m: SegModel):
        return validation_scores(model_predictor(m), datasets, catalog.total_classes, workers=config.workers)

    return run_epochs(state, pseudo_items(samples), evaluate, config,
                      config.stage2.batch_size, config.stage2.eval_every, loss_csv)


class RunDirectory:
    """Files of one run: config snapshot, loss/QA CSVs, checkpoints, iteration records and summary."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def records_path(self) -> Path:
        return self.root / "iterations.json"

    @property
    def summary_path(self) -> Path:
        return self.root / "summary.json"

    def checkpoint(self, t: int) -> Path:
        return self.root / "checkpoints" / f"theta_{t}.ckpt"

    def loss_csv(self, t: int) -> Path:
        return self.root / ("stage1_loss.csv" if t == 0 else f"stage2_iter{t}_loss.csv")

    def qa_csv(self, t: int) -> Path:
        return self.root / f"qa_iter{t}.csv"

    def pseudo_dir(self, t: int) -> Path:
        return self.root / f"pseudo_iter{t}"

    def write_config(self, config: RunConfig) -> None:
        self.config_path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True),
                                    encoding="utf-8")

    def write_records(self, records: Sequence[IterationRecord], stop_reason: Optional[str] = None) -> None:
        """Persist the iteration log together with why the loop stopped."""
        log = IterationLog(stop_reason=stop_reason, records=list(records))
        self.records_path.write_text(log.model_dump_json(indent=2), encoding="utf-8")

    def read_log(self) -> IterationLog:
        """Iteration log of a previous run, empty when none was written."""
        if not self.records_path.exists():
            return IterationLog()
        try:
            return IterationLog.model_validate_json(self.records_path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ManifestError(f"{self.records_path}: malformed iteration log: {e}") from e

    def write_summary(self, summary: Dict[str, Any]) -> Path:
        document = {"schema_version": 1, **summary,
                    "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds")}
        self.summary_path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
        return self.summary_path


def _build_pseudo(model: SegModel, config: RunConfig, catalog: ClassCatalog,
                  datasets: Sequence[PartialDataset], t: int) -> Tuple[List[PseudoSample], int]:
    samples = build_pseudo_dataset(model, datasets, t, config.workers)
    corruption = config.stage2.corruption
    if corruption is None:
        return samples, 0
    spec = corruption.model_copy(update={"seed": corruption.seed * 1000 + t})
    samples, records = inject_corruption(samples, spec, catalog.total_classes)
    return samples, len({r.sample_id for r in records})


def selftrain_loop(
    theta0: TrainState,
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    run_dir: Optional[RunDirectory] = None,
    theta0_val: Optional[float] = None,
    resume: bool = False,
) -> SelfTrainResult:
    """Pseudo-label, assess, filter and fine-tune until validation Dice plateaus or T iterations."""
    stage2 = config.stage2

    def evaluate(m: SegModel):
        return validation_scores(model_predictor(m), datasets, catalog.total_classes, workers=config.workers)

    if theta0_val is None:
        theta0_val, _ = evaluate(theta0.model)
    best_state, best_t, best_val = theta0, 0, theta0_val
    previous = theta0
    records: List[IterationRecord] = []

    if resume and run_dir is not None:
        log = run_dir.read_log()
        records = list(log.records)
        for record in records:
            if record.status == STATUS_COMPLETED and record.checkpoint_ref:
                state, _, _ = load_checkpoint(run_dir.root / record.checkpoint_ref, catalog)
                previous = state
                if _dice_value(record.val_dice_mean) > _dice_value(best_val):
                    best_state, best_t, best_val = state, record.t, record.val_dice_mean
        if log.stop_reason in (STOP_PLATEAU, STOP_EMPTY_FILTERED):
            logger.info(f"Run already stopped ({log.stop_reason}) after iteration {records[-1].t}")
            return SelfTrainResult(best_state, best_t, best_val, records, log.stop_reason)
        if records:
            logger.info(f"Resuming self-training after iteration {records[-1].t}")

    stop_reason = STOP_MAX_ITERATIONS
    for t in range(len(records) + 1, stage2.max_iterations + 1):
        pseudo, corrupted = _build_pseudo(previous.model, config, catalog, datasets, t)
        if run_dir is not None:
            save_pseudo_dataset(pseudo, run_dir.pseudo_dir(t), catalog)
        kept = pseudo
        if stage2.filtering == FilterMode.IMAGE:
            report = assess(pseudo, previous.model, stage2.tau_quantile, config.workers)
            if run_dir is not None:
                write_qa_report(run_dir.qa_csv(t), report)
            try:
                kept = filter_dataset(pseudo, report.verdicts, iteration=t)
            except EmptyFilteredDatasetError as e:
                logger.error(f"Iteration {t} skipped: {e}")
                records.append(IterationRecord(t=t, kept_count=0, total_count=len(pseudo), status=STATUS_SKIPPED,
                                               corrupted_count=corrupted))
                stop_reason = STOP_EMPTY_FILTERED
                break

        if stage2.finetune_origin == FinetuneOrigin.THETA0:
            origin, origin_name = theta0, "theta_0"
        else:
            origin, origin_name = previous, f"theta_{t - 1}"
        logger.info(f"Iteration {t}: fine-tuning {origin_name} on {len(kept)}/{len(pseudo)} pseudo samples")
        result = finetune(origin, origin_name, kept, config, catalog, datasets, t,
                          run_dir.loss_csv(t) if run_dir else None)

        checkpoint_ref = None
        if run_dir is not None:
            path = run_dir.checkpoint(t)
            save_checkpoint(path, result.state, catalog, {
                "iteration": t,
                "finetuned_from": origin_name,
                "val_dice": result.val_dice,
                "kept_count": len(kept),
                "total_count": len(pseudo),
            })
            checkpoint_ref = path.relative_to(run_dir.root).as_posix()
        records.append(IterationRecord(t=t, kept_count=len(kept), total_count=len(pseudo),
                                       val_dice_mean=result.val_dice, val_asd_mean=result.val_asd,
                                       checkpoint_ref=checkpoint_ref, finetuned_from=origin_name,
                                       corrupted_count=corrupted))
        if run_dir is not None:
            run_dir.write_records(records)

        improvement = _dice_value(result.val_dice) - _dice_value(best_val)
        logger.info(f"Iteration {t}: val Dice {result.val_dice} (best so far {best_val})")
        previous = result.state
        if improvement > 0:
            best_state, best_t, best_val = result.state, t, result.val_dice
        if stage2.stop_on_plateau and improvement < stage2.plateau_delta:
            stop_reason = STOP_PLATEAU
            break

    if run_dir is not None:
        run_dir.write_records(records, stop_reason)
    logger.info(f"Self-training stopped ({stop_reason}); best iteration {best_t}, val Dice {best_val}")
    return SelfTrainResult(best_state, best_t, best_val, records, stop_reason)


@dataclass
class MultiNetEnsemble:
    """One network per partially labeled dataset, each predicting only its own classes."""

    members: List[Tuple[Tuple[int, ...], SegModel]]

    def predict(self, image: GridImage) -> LabelMap:
        """Per pixel, the class whose owning network predicts it with the highest probability."""
        labels = np.zeros(image.shape, dtype=np.int64)
        best = np.full(image.shape, -np.inf)
        for classes, model in self.members:
            probs = predict_probs(model, image)
            winner = np.argmax(probs, axis=0)
            for local, k in enumerate(classes, start=1):
                take = (winner == local) & (probs[local] > best)
                labels[take] = k
                best[take] = probs[local][take]
        return LabelMap(labels)


def train_multinets(
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
) -> MultiNetEnsemble:
    """Train the per-dataset baseline under the stage-1 budget."""
    names = sorted({d.name for d in datasets})
    in_channels = _in_channels(datasets)
    members = []
    for index, name in enumerate(names):
        own = [d for d in datasets if d.name == name]
        classes = tuple(sorted(own[0].annotated))
        remap = np.zeros(catalog.num_channels, dtype=np.int64)
        remap[list(classes)] = np.arange(1, len(classes) + 1)

        def make_loss(labels: np.ndarray, remap=remap) -> LossFn:
            return lambda probs: fulllabel_loss(probs, remap[labels])

        items = [TrainItem(s.sample_id, s.image, s.label.labels, make_loss)
                 for d in own if d.split == Split.TRAIN for s in d.samples]
        model = initial_model(config, catalog, in_channels, len(classes) + 1, seed_key=index + 1)
        state = TrainState.fresh(model, config.stage1.base_lr, config.stage1.max_epochs, Stage.INITIAL,
                                 rng_seed=config.seed + index + 1, momentum=config.stage1.momentum)

        def evaluate(m: SegModel, classes=classes, own=own):
            def predict(image: GridImage) -> LabelMap:
                local = np.argmax(predict_probs(m, image), axis=0)
                return LabelMap(np.concatenate([[0], classes])[local])
            return validation_scores(predict, own, catalog.total_classes, workers=config.workers)

        logger.info(f"Multi-Nets: training network for {name} (classes {list(classes)})")
        result = run_epochs(state, items, evaluate, config, config.stage1.batch_size, config.stage1.eval_every)
        members.append((classes, result.state.model))
    return MultiNetEnsemble(members)


def run_pipeline(
    config: RunConfig,
    catalog: ClassCatalog,
    datasets: Sequence[PartialDataset],
    run_dir: RunDirectory,
    resume: bool = False,
) -> Tuple[TrainResult, SelfTrainResult]:
    """Stage 1 followed by self-training, persisted to `run_dir`."""
    run_dir.write_config(config)
    theta0_path = run_dir.checkpoint(0)
    if resume and theta0_path.exists():
        state, _, meta = load_checkpoint(theta0_path, catalog)
        stage1 = TrainResult(state, meta.get("val_dice"), meta.get("val_asd"), state.epoch)
        logger.info(f"Resuming from existing stage-1 checkpoint {theta0_path}")
    else:
        stage1 = train_stage1(config, catalog, datasets, run_dir.loss_csv(0))
        save_checkpoint(theta0_path, stage1.state, catalog, {
            "iteration": 0, "finetuned_from": "init", "val_dice": stage1.val_dice, "val_asd": stage1.val_asd,
        })

    result = selftrain_loop(stage1.state, config, catalog, datasets, run_dir, stage1.val_dice, resume)
    best_ref = run_dir.checkpoint(result.best_iteration).relative_to(run_dir.root).as_posix()
    run_dir.write_summary({
        "theta0_val_dice": stage1.val_dice,
        "best_iteration": result.best_iteration,
        "best_val_dice": result.best_val_dice,
        "best_checkpoint": best_ref,
        "stop_reason": result.stop_reason,
        "iterations": [r.model_dump() for r in result.records],
    })
    return stage1, result
