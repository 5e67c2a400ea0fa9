"""Evaluation campaigns: every (image, setting, policy, seed) cell reconstructed and recorded."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from .agent.trainer import LearnedPolicy
from .baselines import (
    GridTable,
    SearchResult,
    Trajectory,
    evaluate_grid,
    fixed_optimal_from_tables,
    handcrafted_schedule,
    optimal_early_stop,
    oracle_from_table,
    run_fixed,
    run_schedule,
)
from .config import ExperimentConfig, get_settings
from .datasets import LoadedImage, ProblemSetting, build_problem, ingest_dataset, problem_settings
from .denoisers.base import Denoiser, noise_level_map
from .denoisers.training import evaluate_denoiser
from .denoisers.unet import load_denoiser
from .env import PnPEnv, rollout
from .errors import ConfigError
from .models import RESULT_COLUMNS, CurveRecord, DenoiserProfile, PolicyKind, PolicySpec, ResultRecord, SearchRecord
from .operators.base import Problem

logger = logging.getLogger(__name__)

GRID_POLICIES = {PolicyKind.FIXED_OPTIMAL, PolicyKind.ORACLE}


def torch_dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32


def load_prior(config: ExperimentConfig, device: Union[str, torch.device] = "cpu") -> Denoiser:
    config.require_paths("denoiser.checkpoint")
    return load_denoiser(config.denoiser.checkpoint, map_location=device)


@dataclass(frozen=True)
class Outcome:
    """What one policy produced on one problem: the reported PSNR, iterations used, the curve and time.

    ``image`` is the reported iterate (the last one, or the best one for starred policies).
    """

    psnr_db: float
    iterations: int
    trace: List[float]
    wall_time_s: float = 0.0
    image: Optional[torch.Tensor] = field(default=None, compare=False, repr=False)

    def magnitude(self) -> np.ndarray:
        """|x| clipped to [0, 1] as a float64 (H, W) array."""
        if self.image is None:
            raise ValueError("this outcome carries no reconstructed image")
        return self.image.abs().clamp(0.0, 1.0).detach().cpu().double().numpy()


def _from_trajectory(trajectory: Trajectory, early_stop: bool, wall_time_s: float) -> Outcome:
    trace = trajectory.psnr_trace
    iteration = optimal_early_stop(trace)[1] if early_stop else len(trace)
    psnr_db = float(trace[iteration - 1])
    image = trajectory.iterates[iteration - 1] if trajectory.iterates else None
    return Outcome(psnr_db, iteration, list(trace[:iteration]), wall_time_s, image)


class PolicyRunner:
    """Reconstructs one problem under a named policy with the settings of an experiment config."""

    def __init__(self, config: ExperimentConfig, prior: Denoiser, learned: Optional[LearnedPolicy] = None) -> None:
        self.config = config
        self.prior = prior
        self.learned = learned
        self.iterations = config.evaluation.max_iterations

    def run(self, spec: PolicySpec, problem: Problem, chosen: Optional[Tuple[float, float]] = None) -> Outcome:
        """``chosen`` carries the searched (sigma in 8-bit units, mu) for fixed_optimal and oracle."""
        ev = self.config.evaluation
        start = time.perf_counter()
        if spec.kind is PolicyKind.FIXED:
            trajectory = run_fixed(problem, self.prior, ev.fixed_sigma / 255.0, ev.fixed_mu, self.iterations)
        elif spec.kind is PolicyKind.HANDCRAFTED:
            sigma_n = float(problem.model.nominal_noise.reshape(-1)[0])
            sigmas, mus = handcrafted_schedule(sigma_n, self.iterations, ev.handcrafted_sigma_start, ev.handcrafted_lambda)
            trajectory = run_schedule(problem, sigmas, mus, self.prior)
        elif spec.kind in GRID_POLICIES:
            if chosen is None:
                raise ValueError(f"{spec.name} needs searched parameters")
            trajectory = run_fixed(problem, self.prior, chosen[0] / 255.0, chosen[1], self.iterations)
        elif spec.kind is PolicyKind.LEARNED:
            trajectory = self._run_learned(problem)
        else:
            raise ValueError(f"unknown policy kind {spec.kind}")
        elapsed = time.perf_counter() - start if ev.timing else 0.0
        return _from_trajectory(trajectory, spec.early_stop, elapsed)

    def _run_learned(self, problem: Problem) -> Trajectory:
        if self.learned is None:
            raise ConfigError("the learned policy needs agent.snapshot")
        env = self.learned.env
        # termination draws are seeded per (image, setting, seed) cell, not per thread
        policy = self.learned.episode(problem.seed)
        iterates: List[torch.Tensor] = []
        episode = rollout(env, env.reset_problem(problem), policy, on_iterate=lambda opt: iterates.append(opt.x[0].clone()))
        trace = episode.psnr_traces[0]
        sigmas = [s / 255.0 for r in episode.records for s in r.sigmas]
        mus = [m for r in episode.records for m in r.mus]
        return Trajectory(psnr_trace=trace, sigmas=sigmas, mus=mus, iterates=iterates)


@dataclass
class EvaluationRun:
    records: List[ResultRecord] = field(default_factory=list)
    curves: List[CurveRecord] = field(default_factory=list)
    searches: List[SearchRecord] = field(default_factory=list)


@dataclass
class _Cell:
    image: LoadedImage
    setting: ProblemSetting
    seed: int
    problem: Optional[Problem] = None
    table: Optional[GridTable] = None
    outcomes: Dict[str, Outcome] = field(default_factory=dict)


def _problem_dtype() -> torch.dtype:
    return torch_dtype(get_settings().dtype)


def _search_record(image_id: str, setting: ProblemSetting, search: str, result: SearchResult, trace: List[float]) -> SearchRecord:
    return SearchRecord(image_id=image_id, setting=setting.key, search=search, sigma=result.sigma, mu=result.mu, psnr_trace=trace)


def evaluate_policy(
    config: ExperimentConfig,
    prior: Optional[Denoiser] = None,
    images: Optional[Sequence[LoadedImage]] = None,
    learned: Optional[LearnedPolicy] = None,
    workers: Optional[int] = None,
) -> EvaluationRun:
    """Evaluate every configured policy on every (image, setting, seed) and collect result rows."""
    ev = config.evaluation
    specs = [PolicySpec.parse(name, max_inner_iterations=ev.max_iterations) for name in ev.policies]
    if prior is None:
        prior = load_prior(config, get_settings().device)
    if images is None:
        config.require_paths("evaluation.test_dir")
        images = ingest_dataset(config.evaluation.test_dir, config.problems.image_size).images
    if any(s.kind is PolicyKind.LEARNED for s in specs) and learned is None:
        config.require_paths("agent.snapshot")
        learned = LearnedPolicy.from_snapshot(PnPEnv(prior, config.env), config.agent.snapshot, config.agent.termination_mode)

    runner = PolicyRunner(config, prior, learned)
    needs_grid = any(s.kind in GRID_POLICIES for s in specs)
    settings_grid = problem_settings(config.problems)
    cells = [_Cell(image, setting, seed) for image in images for setting in settings_grid for seed in ev.seeds]
    dtype = _problem_dtype()

    def prepare(cell: _Cell) -> _Cell:
        cell.problem = build_problem(cell.image, cell.setting, config.problems, cell.seed, dtype)
        if needs_grid:
            cell.table = evaluate_grid(cell.problem, ev.sigma_grid, ev.mu_grid, prior, ev.max_iterations)
        return cell

    workers = workers or get_settings().num_workers
    logger.info(f"Evaluating {len(specs)} policies on {len(cells)} cells with {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        cells = list(executor.map(prepare, cells))

    run = EvaluationRun()
    fixed_optimal: Dict[Tuple[str, int], SearchResult] = {}
    if needs_grid:
        for setting in settings_grid:
            for seed in ev.seeds:
                tables = [c.table for c in cells if c.setting == setting and c.seed == seed]
                result = fixed_optimal_from_tables(tables)
                fixed_optimal[(setting.key, seed)] = result
                run.searches.append(_search_record("*", setting, "fixed_optimal", result, []))

    def reconstruct(cell: _Cell) -> _Cell:
        oracle = oracle_from_table(cell.table) if cell.table is not None else None
        for spec in specs:
            chosen = None
            if spec.kind is PolicyKind.FIXED_OPTIMAL:
                result = fixed_optimal[(cell.setting.key, cell.seed)]
                chosen = (result.sigma, result.mu)
            elif spec.kind is PolicyKind.ORACLE:
                chosen = (oracle.sigma, oracle.mu)
            # campaigns keep numbers only
            cell.outcomes[spec.name] = replace(runner.run(spec, cell.problem, chosen), image=None)
        return cell

    with ThreadPoolExecutor(max_workers=workers) as executor:
        cells = list(executor.map(reconstruct, cells))

    # rows in (image, setting, policy, seed) order
    order = {(c.image.image_id, c.setting.key, c.seed): c for c in cells}
    for image in images:
        for setting in settings_grid:
            if needs_grid:
                for seed in ev.seeds:
                    cell = order[(image.image_id, setting.key, seed)]
                    result = oracle_from_table(cell.table)
                    run.searches.append(_search_record(image.image_id, setting, "oracle", result, result.traces[0]))
            for spec in specs:
                for seed in ev.seeds:
                    outcome = order[(image.image_id, setting.key, seed)].outcomes[spec.name]
                    common = dict(
                        image_id=image.image_id,
                        task=setting.task.value,
                        accel_or_alpha=setting.accel_or_alpha,
                        sigma_n=setting.sigma_n,
                        policy=spec.name,
                        seed=seed,
                    )
                    run.records.append(
                        ResultRecord(**common, psnr_db=outcome.psnr_db, iterations=outcome.iterations, wall_time_s=outcome.wall_time_s)
                    )
                    run.curves.append(CurveRecord(**common, psnr_trace=outcome.trace))
    return run


def run_single(
    config: ExperimentConfig,
    image: LoadedImage,
    setting: ProblemSetting,
    policy: str,
    seed: int,
    prior: Denoiser,
    learned: Optional[LearnedPolicy] = None,
    search_images: Optional[Sequence[LoadedImage]] = None,
) -> Tuple[ResultRecord, Outcome]:
    """Reconstruct one image under one policy exactly as the evaluation campaign would."""
    ev = config.evaluation
    spec = PolicySpec.parse(policy, max_inner_iterations=ev.max_iterations)
    dtype = _problem_dtype()
    problem = build_problem(image, setting, config.problems, seed, dtype)
    chosen = None
    if spec.kind is PolicyKind.ORACLE:
        result = oracle_from_table(evaluate_grid(problem, ev.sigma_grid, ev.mu_grid, prior, ev.max_iterations))
        chosen = (result.sigma, result.mu)
    elif spec.kind is PolicyKind.FIXED_OPTIMAL:
        if not search_images:
            raise ConfigError("fixed_optimal needs the evaluation image set (evaluation.test_dir)")
        tables = [
            evaluate_grid(build_problem(other, setting, config.problems, seed, dtype), ev.sigma_grid, ev.mu_grid, prior, ev.max_iterations)
            for other in search_images
        ]
        result = fixed_optimal_from_tables(tables)
        chosen = (result.sigma, result.mu)
    outcome = PolicyRunner(config, prior, learned).run(spec, problem, chosen)
    record = ResultRecord(
        image_id=image.image_id,
        task=setting.task.value,
        accel_or_alpha=setting.accel_or_alpha,
        sigma_n=setting.sigma_n,
        policy=spec.name,
        seed=seed,
        psnr_db=outcome.psnr_db,
        iterations=outcome.iterations,
        wall_time_s=outcome.wall_time_s,
    )
    return record, outcome


def results_frame(records: Sequence[ResultRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in records], columns=RESULT_COLUMNS)


def aggregate_results(results: pd.DataFrame) -> pd.DataFrame:
    """Mean PSNR, iterations and wall time per (task, setting, policy) cell."""
    if results.empty:
        raise ValueError("no results to aggregate")
    keys = ["task", "accel_or_alpha", "sigma_n", "policy"]
    grouped = results.groupby(keys, sort=False)
    aggregated = grouped.agg(
        psnr_db=("psnr_db", "mean"),
        iterations=("iterations", "mean"),
        wall_time_s=("wall_time_s", "mean"),
        count=("psnr_db", "size"),
    )
    return aggregated.reset_index()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_results(run: EvaluationRun, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """results.csv, results_aggregated.csv, traces.jsonl and search.jsonl under output_dir."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    frame = results_frame(run.records)
    paths = {
        "results": output_dir / "results.csv",
        "aggregated": output_dir / "results_aggregated.csv",
        "traces": output_dir / "traces.jsonl",
        "search": output_dir / "search.jsonl",
    }
    _atomic_write_text(paths["results"], frame.to_csv(index=False))
    _atomic_write_text(paths["aggregated"], aggregate_results(frame).to_csv(index=False))
    _atomic_write_text(paths["traces"], "".join(c.model_dump_json() + "\n" for c in run.curves))
    _atomic_write_text(paths["search"], "".join(s.model_dump_json() + "\n" for s in run.searches))
    logger.info(f"Wrote {len(run.records)} result rows to {paths['results']}")
    return paths


def profile_denoiser(
    handle: Denoiser,
    images: Sequence[LoadedImage],
    config: ExperimentConfig,
    sigma: float = 50.0,
    repeats: int = 5,
) -> DenoiserProfile:
    """Gaussian denoising PSNR at sigma (8-bit units), PnP PSNR at the searched fixed parameters, ms per 256x256 image."""
    if not images:
        raise ValueError("no images to profile on")
    dtype = _problem_dtype()
    tensors = [image.to_tensor(dtype) for image in images]
    denoising_psnr = evaluate_denoiser(handle, tensors, sigma / 255.0, seed=config.seed)

    ev = config.evaluation
    setting = problem_settings(config.problems)[0]
    tables = [
        evaluate_grid(build_problem(image, setting, config.problems, config.seed, dtype), ev.sigma_grid, ev.mu_grid, handle, ev.max_iterations)
        for image in images
    ]
    best = fixed_optimal_from_tables(tables)

    timing_input = torch.rand((1, 1, 256, 256), generator=torch.Generator().manual_seed(config.seed), dtype=dtype)
    sigma_map = noise_level_map(sigma / 255.0, timing_input)
    with torch.no_grad():
        handle.denoise(timing_input, sigma_map)
        start = time.perf_counter()
        for _ in range(repeats):
            handle.denoise(timing_input, sigma_map)
        runtime_ms = 1000.0 * (time.perf_counter() - start) / repeats

    logger.info(f"Denoiser profile: {denoising_psnr:.2f} dB denoising, {best.mean_psnr:.2f} dB PnP ({setting.key}), {runtime_ms:.1f} ms")
    return DenoiserProfile(
        denoising_psnr=denoising_psnr,
        pnp_psnr=best.mean_psnr,
        runtime_ms=runtime_ms,
        sigma=sigma,
        best_sigma=best.sigma,
        best_mu=best.mu,
    )


def mean_psnr(records: Sequence[ResultRecord], policy: str) -> float:
    values = [r.psnr_db for r in records if r.policy == policy]
    if not values:
        raise ValueError(f"no records for policy {policy}")
    return float(np.mean(values))
