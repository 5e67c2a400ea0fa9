"""Non-learned parameter schedules: fixed, handcrafted, and grid-searched (fixed-optimal, oracle)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .denoisers.base import Denoiser
from .metrics import psnr
from .operators.base import Observation, Problem
from .solver import admm_iterate, initialize

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 30
FIXED_SIGMA = 15.0 / 255.0
FIXED_MU = 0.1


@dataclass(frozen=True)
class Trajectory:
    """PSNR after every iteration of one schedule, with the schedule itself (sigma normalized)."""

    psnr_trace: List[float]
    sigmas: List[float]
    mus: List[float]
    iterates: List[torch.Tensor] = field(default_factory=list, compare=False, repr=False)  # x after every iteration, (H, W)

    @property
    def final_psnr(self) -> float:
        return self.psnr_trace[-1]

    @property
    def iterations(self) -> int:
        return len(self.psnr_trace)

    def early_stopped(self) -> Tuple[float, int]:
        return optimal_early_stop(self.psnr_trace)


def optimal_early_stop(trace: Sequence[float]) -> Tuple[float, int]:
    """(best PSNR, 1-based iteration reaching it); ties go to the earliest iteration."""
    if len(trace) == 0:
        raise ValueError("cannot early-stop an empty PSNR trace")
    values = np.asarray(trace, dtype=np.float64)
    best = int(np.argmax(values))
    return float(values[best]), best + 1


def _replicate(problem: Problem, copies: int) -> Problem:
    if problem.x_gt.shape[0] != 1:
        raise ValueError(f"schedules run on single-image problems, got a batch of {problem.x_gt.shape[0]}")
    if copies == 1:
        return problem
    model = type(problem.model).stack([problem.model] * copies)
    return Problem(
        x_gt=problem.x_gt.expand(copies, -1, -1),
        model=model,
        obs=Observation(problem.obs.y.expand(copies, *problem.obs.y.shape[1:])),
        seed=problem.seed,
        image_id=problem.image_id,
    )


@torch.no_grad()
def run_schedules(
    problem: Problem,
    sigmas: np.ndarray,
    mus: np.ndarray,
    prior: Denoiser,
    on_iterate: Optional[Callable[[int, torch.Tensor], None]] = None,
) -> np.ndarray:
    """Run G schedules of K iterations side by side on one problem; returns PSNR traces (G, K).

    ``on_iterate(k, x)`` sees the (G, H, W) iterate after every iteration.
    """
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    mus = np.atleast_2d(np.asarray(mus, dtype=np.float64))
    if sigmas.shape != mus.shape:
        raise ValueError(f"sigma schedule {sigmas.shape} and mu schedule {mus.shape} differ")
    if (sigmas <= 0).any() or (mus <= 0).any():
        raise ValueError("schedule parameters must be strictly positive")
    batch = _replicate(problem, sigmas.shape[0])
    real_dtype = batch.x_gt.real.dtype
    sigma_t = torch.as_tensor(sigmas, dtype=real_dtype, device=batch.x_gt.device)
    mu_t = torch.as_tensor(mus, dtype=real_dtype, device=batch.x_gt.device)

    state = initialize(batch.obs, batch.model)
    traces = np.empty(sigmas.shape, dtype=np.float64)
    for k in range(sigmas.shape[1]):
        state = admm_iterate(state, sigma_t[:, k], mu_t[:, k], batch.obs, batch.model, prior)
        traces[:, k] = psnr(state.x, batch.x_gt).cpu().numpy()
        if on_iterate is not None:
            on_iterate(k, state.x)
    return traces


def run_schedule(problem: Problem, sigmas: Sequence[float], mus: Sequence[float], prior: Denoiser) -> Trajectory:
    iterates: List[torch.Tensor] = []
    trace = run_schedules(
        problem, np.asarray(sigmas)[None], np.asarray(mus)[None], prior, on_iterate=lambda _, x: iterates.append(x[0].clone())
    )[0]
    return Trajectory(psnr_trace=trace.tolist(), sigmas=list(map(float, sigmas)), mus=list(map(float, mus)), iterates=iterates)


def run_fixed(
    problem: Problem,
    prior: Denoiser,
    sigma: float = FIXED_SIGMA,
    mu: float = FIXED_MU,
    iterations: int = DEFAULT_ITERATIONS,
) -> Trajectory:
    """Constant (sigma, mu) for every iteration; sigma in normalized units."""
    if sigma <= 0 or mu <= 0:
        raise ValueError(f"fixed parameters must be positive, got sigma={sigma}, mu={mu}")
    return run_schedule(problem, [sigma] * iterations, [mu] * iterations, prior)


def handcrafted_schedule(
    sigma_n: float,
    iterations: int = DEFAULT_ITERATIONS,
    sigma_start: float = 35.0,
    lam: float = 0.23,
) -> Tuple[np.ndarray, np.ndarray]:
    """Log-spaced descending sigma from sigma_start/255 to max(sigma_n, 1)/255, mu_k = lam * (sigma_end / sigma_k)^2."""
    sigma_end = max(float(sigma_n), 1.0) / 255.0
    sigmas = np.logspace(math.log10(sigma_start / 255.0), math.log10(sigma_end), iterations)
    mus = lam * (sigma_end / sigmas) ** 2
    return sigmas, mus


def run_handcrafted(
    problem: Problem,
    prior: Denoiser,
    sigma_n: Optional[float] = None,
    iterations: int = DEFAULT_ITERATIONS,
    sigma_start: float = 35.0,
    lam: float = 0.23,
) -> Trajectory:
    if sigma_n is None:
        sigma_n = float(problem.model.nominal_noise.reshape(-1)[0])
    sigmas, mus = handcrafted_schedule(sigma_n, iterations, sigma_start, lam)
    return run_schedule(problem, sigmas, mus, prior)


@dataclass(frozen=True)
class GridTable:
    """PSNR traces of every constant (sigma, mu) pair on one image, shape (S, M, K)."""

    image_id: Optional[str]
    sigma_grid: Tuple[float, ...]  # 8-bit units
    mu_grid: Tuple[float, ...]
    traces: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.traces[..., -1]


@dataclass(frozen=True)
class SearchResult:
    sigma: float  # 8-bit units
    mu: float
    traces: List[List[float]]
    mean_psnr: float


def evaluate_grid(
    problem: Problem,
    sigma_grid: Sequence[float],
    mu_grid: Sequence[float],
    prior: Denoiser,
    iterations: int = DEFAULT_ITERATIONS,
    chunk: int = 32,
) -> GridTable:
    """Exhaustive evaluation of constant schedules over sigma_grid x mu_grid (sigma in 8-bit units)."""
    if len(sigma_grid) == 0 or len(mu_grid) == 0:
        raise ValueError("search grids must not be empty")
    pairs = [(s, m) for s in sigma_grid for m in mu_grid]
    traces = np.empty((len(pairs), iterations), dtype=np.float64)
    for start in range(0, len(pairs), chunk):
        block = pairs[start:start + chunk]
        sigmas = np.repeat(np.array([s / 255.0 for s, _ in block])[:, None], iterations, axis=1)
        mus = np.repeat(np.array([m for _, m in block])[:, None], iterations, axis=1)
        traces[start:start + len(block)] = run_schedules(problem, sigmas, mus, prior)
    return GridTable(
        image_id=problem.image_id,
        sigma_grid=tuple(float(s) for s in sigma_grid),
        mu_grid=tuple(float(m) for m in mu_grid),
        traces=traces.reshape(len(sigma_grid), len(mu_grid), iterations),
    )


def fixed_optimal_from_tables(tables: Sequence[GridTable]) -> SearchResult:
    """Pair maximizing the mean final PSNR over images; ties go to the first grid point."""
    if not tables:
        raise ValueError("no grid tables to reduce")
    mean_final = np.mean([t.final for t in tables], axis=0)
    i, j = np.unravel_index(int(np.argmax(mean_final)), mean_final.shape)
    return SearchResult(
        sigma=tables[0].sigma_grid[i],
        mu=tables[0].mu_grid[j],
        traces=[t.traces[i, j].tolist() for t in tables],
        mean_psnr=float(mean_final[i, j]),
    )


def oracle_from_table(table: GridTable) -> SearchResult:
    i, j = np.unravel_index(int(np.argmax(table.final)), table.final.shape)
    trace = table.traces[i, j].tolist()
    return SearchResult(sigma=table.sigma_grid[i], mu=table.mu_grid[j], traces=[trace], mean_psnr=trace[-1])


def search_fixed_optimal(
    problems: Sequence[Problem],
    sigma_grid: Sequence[float],
    mu_grid: Sequence[float],
    prior: Denoiser,
    iterations: int = DEFAULT_ITERATIONS,
) -> SearchResult:
    tables = [evaluate_grid(p, sigma_grid, mu_grid, prior, iterations) for p in problems]
    result = fixed_optimal_from_tables(tables)
    logger.info(f"Fixed-optimal parameters over {len(problems)} images: sigma={result.sigma:g}, mu={result.mu:g} ({result.mean_psnr:.2f} dB)")
    return result


def search_oracle(
    problem: Problem,
    sigma_grid: Sequence[float],
    mu_grid: Sequence[float],
    prior: Denoiser,
    iterations: int = DEFAULT_ITERATIONS,
) -> SearchResult:
    return oracle_from_table(evaluate_grid(problem, sigma_grid, mu_grid, prior, iterations))
