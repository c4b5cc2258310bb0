"""Command-line surface: generate, train, selftrain, assess, eval, report, ablate.

Usage:
    python run.py generate --config configs/mini_bowel_spec.json --out corpus/
    python run.py train --config configs/mini_bowel_run.json --out runs/stage1
    python run.py selftrain --config configs/mini_bowel_run.json --out runs/cosst
    python run.py eval --config configs/mini_bowel_run.json --checkpoint runs/cosst/checkpoints/theta_1.ckpt --out eval/
    python run.py report --run stage1=eval_theta0 --run cosst=eval_final --out report/
"""
import argparse
import csv
import json
import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .ablation import (
    STUDIES,
    data_size_study,
    filtering_study,
    iteration_study,
    multinets_study,
    threshold_study,
    write_rows,
)
from .config import (
    FilterMode,
    FinetuneOrigin,
    GenerateSpec,
    RunConfig,
    load_datasets,
    load_json_model,
    load_run_config,
    write_manifests,
)
from .core import Split
from .exceptions import (
    CatalogMismatchError,
    CosstError,
    EmptyFilteredDatasetError,
    InvalidInputError,
    ManifestError,
    TrainingDivergedError,
)
from .metrics import (
    EvalRow,
    evaluate_labels,
    read_eval_rows,
    summarize,
    wilcoxon_signed_rank,
    write_eval_rows,
)
from .model import load_checkpoint, save_checkpoint
from .pseudo import build_pseudo_dataset, load_pseudo_dataset, predict_labels
from .qa import assess_features, extract_features, quality_correlation, write_qa_report
from .selftrain import (
    STOP_EMPTY_FILTERED,
    RunDirectory,
    run_pipeline,
    train_multinets,
    train_stage1,
    validation_scores,
)
from .synth import corruption_summary, generate_corpus, inject_corruption, oracle_pseudo_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3
EXIT_EMPTY_FILTERED = 4
EXIT_INTERRUPTED = 130
REPORT_CSV_COLUMNS = ("run", "class", "dice", "asd", "hd95", "count")


def setup_logging(verbose: bool = False) -> None:
    """Configure logging for CLI output."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )


def _write_json(path: Path, document: Dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _run_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.model_copy(update={"seed": args.seed})
    stage2 = {}
    if getattr(args, "tau", None) is not None:
        stage2["tau_quantile"] = args.tau
    if getattr(args, "filter", None) is not None:
        stage2["filtering"] = FilterMode(args.filter)
    if getattr(args, "max_iters", None) is not None:
        stage2["max_iterations"] = args.max_iters
    if getattr(args, "origin", None) is not None:
        stage2["finetune_origin"] = FinetuneOrigin(args.origin)
    if stage2:
        # re-validate so CLI overrides obey the same bounds as the file
        merged = config.stage2.model_dump()
        merged.update(stage2)
        config = config.model_copy(update={"stage2": type(config.stage2).model_validate(merged)})
    return config


def cmd_generate(args: argparse.Namespace) -> int:
    """Generate the synthetic corpus and its manifest."""
    spec = load_json_model(args.config, GenerateSpec)
    if args.seed is not None:
        spec = spec.model_copy(update={"scene": spec.scene.model_copy(update={"seed": args.seed})})
    out_dir = Path(args.out)
    catalog = spec.scene.catalog()
    datasets = generate_corpus(spec.scene, spec.n_samples, spec.partition, spec.split_fractions,
                               spec.names, spec.workers)
    manifests = write_manifests(datasets, catalog, out_dir)

    card = {
        "schema_version": 1,
        "spec": spec.model_dump(mode="json"),
        "catalog": list(catalog.names),
        "manifests": [p.name for p in manifests],
        "counts": {f"{d.name}/{d.split.value}": len(d) for d in datasets},
    }
    if spec.corruption is not None:
        _, records = inject_corruption(oracle_pseudo_dataset(datasets), spec.corruption, catalog.total_classes)
        card["corruption"] = corruption_summary(records)
    _write_json(out_dir / "corpus_card.json", card)
    logger.info(f"Corpus written to {out_dir}: {len(manifests)} manifests, {catalog.total_classes} classes")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Run stage 1 on the marginal and exclusion losses and save theta_0."""
    config = _run_config(args)
    catalog, datasets = load_datasets(config.datasets)
    run_dir = RunDirectory(args.out)
    run_dir.write_config(config)
    result = train_stage1(config, catalog, datasets, run_dir.loss_csv(0))
    path = save_checkpoint(run_dir.checkpoint(0), result.state, catalog, {
        "iteration": 0, "finetuned_from": "init", "val_dice": result.val_dice, "val_asd": result.val_asd,
    })
    summary = {
        "theta0_val_dice": result.val_dice,
        "theta0_val_asd": result.val_asd,
        "best_epoch": result.best_epoch,
        "checkpoint": path.relative_to(run_dir.root).as_posix(),
    }
    if args.multinets:
        ensemble = train_multinets(config, catalog, datasets)
        summary["multinets_val_dice"], _ = validation_scores(ensemble.predict, datasets, catalog.total_classes,
                                                             workers=config.workers)
    run_dir.write_summary(summary)
    logger.info(f"Stage 1 checkpoint: {path} (val Dice {result.val_dice})")
    return EXIT_OK


def cmd_selftrain(args: argparse.Namespace) -> int:
    """Run the self-training loop from a stage-1 checkpoint."""
    config = _run_config(args)
    catalog, datasets = load_datasets(config.datasets)
    run_dir = RunDirectory(args.out)
    resume = args.resume
    if args.theta0:
        load_checkpoint(args.theta0, catalog)
        run_dir.checkpoint(0).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(args.theta0, run_dir.checkpoint(0))
        resume = True
    _, result = run_pipeline(config, catalog, datasets, run_dir, resume=resume)
    for record in result.records:
        logger.info(
            f"  t={record.t} [{record.status}] kept {record.kept_count}/{record.total_count} "
            f"val Dice {record.val_dice_mean}"
        )
    if result.stop_reason == STOP_EMPTY_FILTERED:
        last = result.records[-1]
        raise EmptyFilteredDatasetError(
            f"Filtering removed all {last.total_count} pseudo samples at iteration {last.t}",
            iteration=last.t,
            total_count=last.total_count,
        )
    return EXIT_OK


def cmd_assess(args: argparse.Namespace) -> int:
    """Score pseudo labels with the QA filter and write the report."""
    out_dir = Path(args.out)
    if args.pseudo:
        catalog, pseudo = load_pseudo_dataset(args.pseudo)
        state, _, _ = load_checkpoint(args.checkpoint, catalog)
        workers = 1
    else:
        if not args.config:
            raise InvalidInputError("assess needs --pseudo or --config")
        config = _run_config(args)
        catalog, datasets = load_datasets(config.datasets, splits=[Split.TRAIN])
        state, _, _ = load_checkpoint(args.checkpoint, catalog)
        workers = config.workers
        pseudo = build_pseudo_dataset(state.model, datasets, 0, workers)
        if config.stage2.corruption is not None:
            pseudo, records = inject_corruption(pseudo, config.stage2.corruption, catalog.total_classes)
            _write_json(out_dir / "corruption.json", corruption_summary(records))

    per_sample = extract_features(pseudo, state.model, workers)
    sample_ids = [s.sample_id for s in pseudo]
    summary = []
    for quantile in args.tau_list:
        report = assess_features(sample_ids, per_sample, quantile)
        write_qa_report(out_dir / f"qa_tau{quantile}.csv", report)
        correlation = quality_correlation(report)
        summary.append({
            "tau_quantile": quantile,
            "threshold": report.threshold,
            "kept_count": report.kept_count,
            "total_count": len(report.verdicts),
            "quality_correlation": {str(k): v for k, v in correlation.items()},
        })
        logger.info(f"tau {quantile}: kept {report.kept_count}/{len(report.verdicts)}")
    _write_json(out_dir / "assess_summary.json", {"schema_version": 1, "thresholds": summary})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a checkpoint on one split and write per-sample Dice and ASD."""
    config = _run_config(args)
    split = Split(args.split)
    catalog, datasets = load_datasets(config.datasets, splits=[split])
    state, _, _ = load_checkpoint(args.checkpoint, catalog)
    rows: List[EvalRow] = []
    for dataset in datasets:
        for sample in dataset.samples:
            truth = sample.oracle if args.oracle and sample.oracle is not None else sample.label
            annotated = catalog.all_classes if args.oracle and sample.oracle is not None else dataset.annotated
            rows.extend(evaluate_labels(sample.sample_id, predict_labels(state.model, sample.image), truth,
                                        annotated, catalog.total_classes, dataset.name))
    out_dir = Path(args.out)
    write_eval_rows(out_dir / "eval_rows.csv", rows)
    summary = summarize(rows, catalog.total_classes)
    _write_json(out_dir / "eval_summary.json", {
        "schema_version": 1,
        "checkpoint": Path(args.checkpoint).name,
        "split": split.value,
        "oracle": bool(args.oracle),
        **summary.to_dict(),
    })
    logger.info(f"Grand mean Dice {summary.grand_dice} on {len(rows)} rows ({split.value})")
    return EXIT_OK


def _per_sample_dice(rows: Sequence[EvalRow]) -> Dict[Tuple[str, str], float]:
    grouped: Dict[Tuple[str, str], List[float]] = {}
    for row in rows:
        if row.evaluable:
            grouped.setdefault((row.dataset, row.sample_id), []).append(row.dice)
    return {key: float(np.mean(values)) for key, values in grouped.items()}


def _parse_runs(pairs: Sequence[str]) -> List[Tuple[str, Path]]:
    runs = []
    for pair in pairs:
        name, sep, folder = pair.partition("=")
        if not sep or not name or not folder:
            raise InvalidInputError(f"--run expects NAME=EVAL_DIR, got {pair!r}")
        path = Path(folder) / "eval_rows.csv"
        if not path.exists():
            raise FileNotFoundError(f"Evaluation rows not found: {path}")
        runs.append((name, path))
    return runs


def cmd_report(args: argparse.Namespace) -> int:
    """Summarize an evaluation CSV per dataset and class."""
    runs = _parse_runs(args.run)
    loaded = {name: read_eval_rows(path) for name, path in runs}
    baseline_name = runs[0][0]
    baseline = _per_sample_dice(loaded[baseline_name])

    table = []
    document: Dict[str, object] = {"schema_version": 1, "baseline": baseline_name, "runs": {}}
    for name, rows in loaded.items():
        summary = summarize(rows)
        for k, cls in sorted(summary.per_class.items()):
            table.append([name, k, cls.dice, cls.asd, cls.hd95, cls.count])
        table.append([name, "mean", summary.grand_dice, summary.grand_asd, summary.grand_hd95,
                      sum(c.count for c in summary.per_class.values())])
        entry = summary.to_dict()
        if name != baseline_name:
            current = _per_sample_dice(rows)
            keys = sorted(set(baseline) & set(current))
            try:
                test = wilcoxon_signed_rank([baseline[k] for k in keys], [current[k] for k in keys])
                entry["wilcoxon_vs_baseline"] = {"statistic": test.statistic, "p_value": test.p_value,
                                                 "method": test.method, "n": test.n}
            except InvalidInputError as e:
                logger.warning(f"No Wilcoxon test for {name}: {e}")
                entry["wilcoxon_vs_baseline"] = None
        document["runs"][name] = entry

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_CSV_COLUMNS)
        for cells in table:
            writer.writerow(["NA" if v is None else repr(v) if isinstance(v, float) else str(v) for v in cells])
    _write_json(out_dir / "report.json", document)
    logger.info(f"Report for {len(runs)} runs written to {out_dir}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    """Run one ablation study and write its rows."""
    config = _run_config(args)
    catalog, datasets = load_datasets(config.datasets)
    out_dir = Path(args.out)
    seeds = args.seeds or [config.seed]
    study = args.study
    if study == "filtering":
        rows = filtering_study(config, catalog, datasets, seeds)
    elif study == "multinets":
        rows = multinets_study(config, catalog, datasets, seeds)
    elif study == "iterations":
        rows = iteration_study(config, catalog, datasets, args.max_iters or 4)
    elif study == "data_size":
        rows = data_size_study(config, catalog, datasets)
    else:
        if not args.checkpoint:
            raise InvalidInputError("The threshold study needs --checkpoint")
        state, _, _ = load_checkpoint(args.checkpoint, catalog)
        pseudo = build_pseudo_dataset(state.model, datasets, 0, config.workers)
        rows = threshold_study(state.model, pseudo, args.tau_list or (0.999, 0.99, 0.95), config.workers)
    path = write_rows(out_dir / f"ablation_{study}.csv", rows)
    if path is None:
        logger.warning(f"Ablation {study} produced no rows; nothing written")
    else:
        logger.info(f"Ablation {study}: {len(rows)} rows written to {path}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="Run config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="Override the run seed")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosst",
        description="Partial-label multi-organ segmentation with filtered self-training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Generate a synthetic partially labeled corpus")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="Stage 1: train the unified model on partial labels")
    _add_common(p)
    p.add_argument("--multinets", action="store_true", help="Also train the per-dataset baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selftrain", help="Stage 1 (or a given checkpoint) followed by self-training")
    _add_common(p)
    p.add_argument("--tau", type=float, default=None, help="QA chi-squared quantile")
    p.add_argument("--filter", choices=[m.value for m in FilterMode], default=None)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    origin = p.add_mutually_exclusive_group()
    origin.add_argument("--from-theta0", dest="origin", action="store_const", const=FinetuneOrigin.THETA0.value)
    origin.add_argument("--from-prev", dest="origin", action="store_const", const=FinetuneOrigin.PREVIOUS.value)
    p.add_argument("--theta0", default=None, help="Existing stage-1 checkpoint to start from")
    p.add_argument("--resume", action="store_true", help="Continue an interrupted run directory")
    p.set_defaults(func=cmd_selftrain, origin=None)

    p = sub.add_parser("assess", help="Score pseudo labels of a checkpoint at one or more thresholds")
    _add_common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pseudo", default=None, help="Saved pseudo manifest (instead of --config)")
    p.add_argument("--tau", dest="tau_list", type=float, nargs="+", default=[0.999])
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a manifest split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    p.add_argument("--oracle", action="store_true", help="Score every class against hidden full labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="Compare evaluated runs, with Wilcoxon p-values against the first")
    p.add_argument("--run", action="append", required=True, help="NAME=EVAL_DIR (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="Run one of the ablation studies")
    _add_common(p)
    p.add_argument("--study", choices=STUDIES, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tau", dest="tau_list", type=float, nargs="+", default=None)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    try:
        return args.func(args)
    except (ManifestError, CatalogMismatchError, FileNotFoundError, ValidationError, InvalidInputError) as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_BAD_INPUT
    except TrainingDivergedError as e:
        logger.error(f"Training diverged: {e}")
        if e.last_state is not None and getattr(args, "config", None):
            path = Path(args.out) / "checkpoints" / "diverged_last_finite.ckpt"
            try:
                catalog, _ = load_datasets(_run_config(args).datasets, splits=[Split.VALID])
                save_checkpoint(path, e.last_state, catalog, {"diverged": True})
                logger.info(f"Last finite state saved to {path}")
            except CosstError:
                logger.warning("Could not save the last finite state")
        return EXIT_DIVERGED
    except EmptyFilteredDatasetError as e:
        logger.error(f"Empty filtered dataset (iteration {e.iteration}, {e.total_count} samples): {e}")
        return EXIT_EMPTY_FILTERED
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return EXIT_INTERRUPTED
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_FAILURE
