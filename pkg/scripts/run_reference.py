#!/usr/bin/env python
"""
Run the reference pipeline end to end and time each step.

Usage:
    python scripts/run_reference.py
    python scripts/run_reference.py --workdir runs/reference --seed 1
"""
import sys
import argparse
import json
import logging
import time
from pathlib import Path

# Add src to path for local development
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cosst.cli import EXIT_OK, main as cosst_main, setup_logging

CONFIGS = Path(__file__).parent.parent / "configs"


def main() -> int:
    """Main entry point for CLI."""
    parser = argparse.ArgumentParser(
        description="generate -> train -> selftrain -> eval on the reference corpus"
    )
    parser.add_argument(
        "--workdir",
        type=str,
        default="runs/reference",
        help="Folder for the corpus and every run (default: runs/reference)",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Override the run seed",
    )
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="Enable verbose logging",
    )

    args = parser.parse_args()
    setup_logging(args.verbose)
    logger = logging.getLogger(__name__)

    workdir = Path(args.workdir).resolve()
    corpus = workdir / "corpus"
    workdir.mkdir(parents=True, exist_ok=True)

    run_config = json.loads((CONFIGS / "mini_bowel_run.json").read_text(encoding="utf-8"))
    run_config["datasets"] = [str(corpus / "bowel_a_manifest.json"), str(corpus / "bowel_b_manifest.json")]
    config_path = workdir / "run.json"
    config_path.write_text(json.dumps(run_config, indent=2), encoding="utf-8")

    seed = ["--seed", str(args.seed)] if args.seed is not None else []
    verbose = ["-v"] if args.verbose else []
    theta0 = workdir / "stage1" / "checkpoints" / "theta_0.ckpt"
    steps = [
        ("generate", ["generate", "--config", str(CONFIGS / "mini_bowel_spec.json"), "--out", str(corpus)]),
        ("train", ["train", "--config", str(config_path), "--out", str(workdir / "stage1")] + seed),
        ("selftrain", ["selftrain", "--config", str(config_path), "--out", str(workdir / "cosst"),
                       "--theta0", str(theta0)] + seed),
    ]

    timings = {}
    started = time.perf_counter()
    for name, argv in steps:
        step_start = time.perf_counter()
        code = cosst_main(argv + verbose)
        timings[name] = time.perf_counter() - step_start
        if code != EXIT_OK:
            logger.error(f"Step {name} failed with exit code {code}")
            return code

    summary = json.loads((workdir / "cosst" / "summary.json").read_text(encoding="utf-8"))
    for name, checkpoint in (("eval_theta0", theta0), ("eval_final", workdir / "cosst" / summary["best_checkpoint"])):
        step_start = time.perf_counter()
        code = cosst_main(["eval", "--config", str(config_path), "--checkpoint", str(checkpoint),
                           "--out", str(workdir / name)] + verbose)
        timings[name] = time.perf_counter() - step_start
        if code != EXIT_OK:
            logger.error(f"Step {name} failed with exit code {code}")
            return code

    code = cosst_main(["report", "--run", f"stage1={workdir / 'eval_theta0'}",
                       "--run", f"cosst={workdir / 'eval_final'}", "--out", str(workdir / "report")])
    total = time.perf_counter() - started
    for name, seconds in timings.items():
        logger.info(f"{name:>12}: {seconds:7.1f} s")
    logger.info(f"{'total':>12}: {total:7.1f} s (best iteration {summary['best_iteration']})")
    return code


if __name__ == "__main__":
    sys.exit(main())
