"""Command-line entry point: ``python -m tunefree_pnp <subcommand> --config FILE [--section.key VALUE ...]``."""
from __future__ import annotations

import argparse
import enum
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .config import ExperimentConfig, dump_config, get_settings, iter_config_keys, load_config
from .errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
OVERRIDE_PREFIX = "override:"


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, handlers=handlers, force=True)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{text}'")


def _flag_kwargs(annotation: Any) -> Dict[str, Any]:
    """argparse type/nargs for a config field annotation; pydantic validates the values afterwards."""
    origin = typing.get_origin(annotation)
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    if origin is typing.Union and len(args) == 1:
        return _flag_kwargs(args[0])
    if origin in (list, List, tuple):
        item = args[0] if args else str
        return {"nargs": "+", "type": item if item in (int, float) else str}
    if annotation is bool:
        return {"type": _parse_bool}
    if annotation in (int, float):
        return {"type": annotation}
    if isinstance(annotation, type) and issubclass(annotation, enum.Enum):
        return {"type": str, "choices": [m.value for m in annotation]}
    return {"type": str}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML experiment file")
    group = parser.add_argument_group("config overrides")
    for key, annotation in iter_config_keys(ExperimentConfig):
        group.add_argument(f"--{key}", dest=OVERRIDE_PREFIX + key, default=argparse.SUPPRESS, metavar="VALUE", **_flag_kwargs(annotation))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tunefree-pnp", description="Tuning-free PnP-ADMM reconstruction toolkit")
    commands = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        _add_config_flags(sub)
        return sub

    command("make-masks", "write one .npz mask per configured acceleration")
    command("train-denoiser", "train the residual U-Net prior").add_argument("--resume", type=Path, help="denoiser checkpoint to continue from")
    command("profile-denoiser", "denoising PSNR, PnP PSNR and runtime of a checkpoint").add_argument(
        "--sigma", type=float, default=50.0, help="Gaussian noise level in 8-bit units"
    )
    command("train-policy", "train policy and value networks").add_argument("--resume", type=Path, help="policy snapshot to continue from")
    command("eval", "evaluate the configured policies and write results.csv")
    report = command("report", "tables or PSNR curves from an eval output directory")
    report.add_argument("--kind", choices=["table", "curves"], default="table")
    report.add_argument("--results-dir", type=Path, help="eval output directory (default: the config output_dir)")
    report.add_argument("--out", type=Path, help="where to write the report (default: <results-dir>/report)")
    run = command("run", "reconstruct one image and print its PSNR and iteration count")
    run.add_argument("--image", type=Path, required=True)
    run.add_argument("--policy", default="fixed")
    run.add_argument("--setting", help="setting key such as csmri-x4-s15 or pr-a27 (default: first of the grid)")
    run.add_argument("--seed", type=int, help="default: first of evaluation.seeds")
    run.add_argument("--save-image", type=Path, help="write |x| of the reported iterate, clipped to [0, 1], to this file (PNG)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {k[len(OVERRIDE_PREFIX):]: v for k, v in vars(args).items() if k.startswith(OVERRIDE_PREFIX)}
    return load_config(args.config, overrides)


# subcommands


def cmd_make_masks(config: ExperimentConfig, args: argparse.Namespace, output_dir: Path) -> int:
    from .datasets import mask_filename
    from .operators.masks import acceleration_to_rate, make_mask, save_mask

    mask_dir = Path(config.problems.mask_dir) if config.problems.mask_dir is not None else output_dir / "masks"
    size = config.problems.image_size
    for acceleration in config.problems.accelerations:
        mask = make_mask((size, size), config.problems.mask_pattern, acceleration_to_rate(acceleration), config.problems.mask_seed)
        path = save_mask(mask, mask_dir / mask_filename(acceleration))
        logger.info(f"x{acceleration:g}: sampling rate {mask.sampling_rate:.4f} -> {path}")
    return 0


def cmd_train_denoiser(config: ExperimentConfig, args: argparse.Namespace, output_dir: Path) -> int:
    import torch

    from .datasets import ingest_dataset
    from .denoisers.training import extract_patches, train_denoiser

    training = config.denoiser.training
    corpus = ingest_dataset(training.corpus_dir)
    patches = extract_patches([image.to_tensor(torch.float32) for image in corpus], training.patch_size, training.patch_stride, training.max_patches)
    logger.info(f"Extracted {patches.shape[0]} patches of {training.patch_size}x{training.patch_size}")
    run = train_denoiser(
        patches,
        training,
        output_dir / "denoiser",
        widths=config.denoiser.widths,
        convs_per_scale=config.denoiser.convs_per_scale,
        resume_from=args.resume,
        device=get_settings().device,
    )
    if run.checkpoints:
        print(run.checkpoints[-1])
    return 0


def cmd_profile_denoiser(config: ExperimentConfig, args: argparse.Namespace, output_dir: Path) -> int:
    from .datasets import ingest_dataset
    from .evaluation import load_prior, profile_denoiser

    prior = load_prior(config, get_settings().device)
    images = ingest_dataset(config.evaluation.test_dir, config.problems.image_size).images
    profile = profile_denoiser(prior, images, config, sigma=args.sigma)
    (output_dir / "denoiser_profile.json").write_text(profile.model_dump_json(indent=2), encoding="utf-8")
    print(profile.model_dump_json())
    return 0


def cmd_train_policy(config: ExperimentConfig, args: argparse.Namespace, output_dir: Path) -> int:
    from .agent.trainer import train_policy
    from .datasets import ingest_dataset
    from .evaluation import load_prior, torch_dtype

    runtime = get_settings()
    prior = load_prior(config, runtime.device)
    images = ingest_dataset(config.agent.train_dir, config.problems.image_size).images
    snapshot = train_policy(images, config, prior, output_dir / "policy", resume_from=args.resume, device=runtime.device, dtype=torch_dtype(runtime.dtype))
    print(output_dir / "policy" / "policy_final.pt", f"iteration {snapshot.meta.iteration}")
    return 0


def cmd_eval(config: ExperimentConfig, args: argparse.Namespace, output_dir: Path) -> int:
    from .evaluation import evaluate_policy, write_results

    paths = write_results(evaluate_policy(config), output_dir)
    print(paths["results"])
    return 0


def cmd_report(config: ExperimentConfig, args: argparse.Namespace, output_dir: Path) -> int:
    from .reporting import report

    results_dir = args.results_dir or output_dir
    for path in report(results_dir, args.kind, args.out):
        print(path)
    return 0


def cmd_run(config: ExperimentConfig, args: argparse.Namespace, output_dir: Path) -> int:
    from .agent.trainer import LearnedPolicy
    from .datasets import ingest_dataset, load_image, problem_settings, save_image
    from .env import PnPEnv
    from .evaluation import load_prior, run_single
    from .models import PolicyKind, PolicySpec

    spec = PolicySpec.parse(args.policy)
    prior = load_prior(config, get_settings().device)
    image = load_image(args.image, config.problems.image_size)
    settings_grid = problem_settings(config.problems)
    if args.setting is None:
        setting = settings_grid[0]
    else:
        matches = [s for s in settings_grid if s.key == args.setting]
        if not matches:
            raise ConfigError(f"unknown setting '{args.setting}'; configured: {', '.join(s.key for s in settings_grid)}")
        setting = matches[0]
    seed = args.seed if args.seed is not None else config.evaluation.seeds[0]

    learned = None
    if spec.kind is PolicyKind.LEARNED:
        config.require_paths("agent.snapshot")
        learned = LearnedPolicy.from_snapshot(PnPEnv(prior, config.env), config.agent.snapshot, config.agent.termination_mode)
    search_images = None
    if spec.kind is PolicyKind.FIXED_OPTIMAL:
        config.require_paths("evaluation.test_dir")
        search_images = ingest_dataset(config.evaluation.test_dir, config.problems.image_size).images

    record, outcome = run_single(config, image, setting, spec.name, seed, prior, learned, search_images)
    print(f"{record.image_id} {setting.key} {record.policy} seed {record.seed}: PSNR {record.psnr_db:.4f} dB, {record.iterations} iterations")
    if args.save_image is not None:
        save_image(outcome.magnitude(), args.save_image)
    return 0


REQUIRED_PATHS = {
    "train-denoiser": ("denoiser.training.corpus_dir",),
    "profile-denoiser": ("denoiser.checkpoint", "evaluation.test_dir"),
    "train-policy": ("denoiser.checkpoint", "agent.train_dir"),
    "eval": ("denoiser.checkpoint", "evaluation.test_dir"),
    "run": ("denoiser.checkpoint",),
}

COMMANDS = {
    "make-masks": cmd_make_masks,
    "train-denoiser": cmd_train_denoiser,
    "profile-denoiser": cmd_profile_denoiser,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    runtime = get_settings()
    setup_logging(runtime.log_level, runtime.log_file)
    try:
        config = resolve_config(args)
        config.require_paths(*REQUIRED_PATHS.get(args.command, ()))
        if args.command == "eval" and any(name.rstrip("*") == "learned" for name in config.evaluation.policies):
            config.require_paths("agent.snapshot")
        output_dir = config.resolved_output_dir()
        if args.command != "report":
            dump_config(config, output_dir / "config.resolved.toml")
        return COMMANDS[args.command](config, args, output_dir)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
