#!/usr/bin/env python3
"""
Experiment Pipeline Runner
Runs the subcommands of one experiment config in order:
masks, denoiser training, policy training, evaluation and reports.
"""

import argparse
import logging
import sys
from pathlib import Path

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from tunefree_pnp.cli import main as cli_main  # noqa: E402
from tunefree_pnp.config import Task, load_config  # noqa: E402

STEPS = ["make-masks", "train-denoiser", "train-policy", "eval", "report"]

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

logger = logging.getLogger(__name__)


def planned_steps(config_path: Path, requested):
    """Steps to run for this config; masks only apply to CS-MRI, the policy only when it is evaluated."""
    config = load_config(config_path)
    steps = list(requested or STEPS)
    if config.problems.task is not Task.CSMRI and "make-masks" in steps:
        logger.info("Phase retrieval config: skipping make-masks")
        steps.remove("make-masks")
    learned = any(name.rstrip("*") == "learned" for name in config.evaluation.policies)
    if not learned and "train-policy" in steps and requested is None:
        logger.info("No learned policy in evaluation.policies: skipping train-policy")
        steps.remove("train-policy")
    return steps


def main():
    parser = argparse.ArgumentParser(description="Run an experiment config end to end")
    parser.add_argument("config", type=Path, help="TOML experiment file")
    parser.add_argument("--steps", nargs="+", choices=STEPS, help="subset of steps to run (default: all that apply)")
    args = parser.parse_args()

    if not args.config.is_file():
        logger.error(f"Config file not found: {args.config}")
        return 1

    steps = planned_steps(args.config, args.steps)
    logger.info(f"Running {', '.join(steps)} for {args.config}")
    for step in steps:
        argv = [step, "--config", str(args.config)]
        if step == "report":
            for kind in ("table", "curves"):
                code = cli_main(argv + ["--kind", kind])
                if code != 0:
                    logger.error(f"report --kind {kind} failed with exit code {code}")
                    return code
            continue
        logger.info(f"Step {step}...")
        code = cli_main(argv)
        if code != 0:
            logger.error(f"Step {step} failed with exit code {code}")
            return code
    logger.info("Pipeline completed successfully!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
