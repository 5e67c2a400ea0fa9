"""Parameter selection for PnP-ADMM as a Markov decision process.

A state is the full optimization state plus its problem instance; one
transition runs a block of m ADMM iterations under the parameters chosen by
the action; the reward is the PSNR gain of the block minus a continuation
penalty eta. All tensors carry a leading batch axis so many episodes step
together; items that are done stay frozen.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Union

import torch

from .config import EnvConfig
from .denoisers.base import Denoiser
from .errors import EpisodeFinishedError
from .metrics import psnr
from .models import TransitionRecord
from .operators.base import MeasurementModel, Observation, Problem, make_problem
from .solver import OptState, ParamBlock, initialize, run_block

logger = logging.getLogger(__name__)

# Observation plane order
OBSERVATION_PLANES = (
    "x.real", "x.imag",
    "z.real", "z.imag",
    "u.real", "u.imag",
    "x0.real", "x0.imag",
    "noise_level",
    "t/N",
)


@dataclass(frozen=True)
class EnvState:
    opt: OptState
    init: torch.Tensor
    obs: Observation
    model: MeasurementModel
    x_gt: Optional[torch.Tensor]
    t: torch.Tensor  # (B,) block index
    done: torch.Tensor  # (B,) bool

    @property
    def batch_size(self) -> int:
        return self.opt.batch_size

    def detach(self) -> "EnvState":
        return replace(
            self,
            opt=self.opt.detach(),
            init=self.init.detach(),
            obs=self.obs.detach(),
            x_gt=None if self.x_gt is None else self.x_gt.detach(),
        )

    def select(self, index: Sequence[int]) -> "EnvState":
        index = list(index)
        return EnvState(
            opt=self.opt.select(index),
            init=self.init[index],
            obs=self.obs.select(index),
            model=self.model.select(index),
            x_gt=None if self.x_gt is None else self.x_gt[index],
            t=self.t[index],
            done=self.done[index],
        )

    def split(self) -> List["EnvState"]:
        return [self.select([i]) for i in range(self.batch_size)]

    @staticmethod
    def stack(items: Sequence["EnvState"]) -> "EnvState":
        if not items:
            raise ValueError("cannot stack an empty list of states")
        with_gt = [s.x_gt is not None for s in items]
        if any(with_gt) and not all(with_gt):
            raise ValueError("cannot mix states with and without ground truth")
        return EnvState(
            opt=OptState.stack([s.opt for s in items]),
            init=torch.cat([s.init for s in items]),
            obs=Observation.stack([s.obs for s in items]),
            model=type(items[0].model).stack([s.model for s in items]),
            x_gt=torch.cat([s.x_gt for s in items]) if all(with_gt) else None,
            t=torch.cat([s.t for s in items]),
            done=torch.cat([s.done for s in items]),
        )


@dataclass(frozen=True)
class Action:
    a1: torch.Tensor  # (B,) 1 = terminate
    a2: torch.Tensor  # (B, 2m) or (B, 2) in shared mode, entries in (0, 1]


class StepResult(NamedTuple):
    state: EnvState
    reward: Optional[torch.Tensor]
    done: torch.Tensor


def _check_unit_interval(raw: torch.Tensor, what: str) -> None:
    if bool((raw <= 0).any()) or bool((raw > 1).any()):
        raise ValueError(f"{what} must lie in (0, 1]")


def decode_params(a2: torch.Tensor, m: int, sigma_max: float = 50.0 / 255.0, shared: bool = False) -> ParamBlock:
    """sigma_j = a2_j * sigma_max, mu_j = a2_{m+j}; shared mode repeats one pair m times."""
    if a2.dim() == 1:
        a2 = a2.unsqueeze(0)
    _check_unit_interval(a2, "action parameters")
    width = 1 if shared else m
    if a2.shape[-1] != 2 * width:
        raise ValueError(f"expected {2 * width} action parameters, got {a2.shape[-1]}")
    sigmas = a2[:, :width] * sigma_max
    mus = a2[:, width:]
    if shared:
        sigmas = sigmas.expand(-1, m)
        mus = mus.expand(-1, m)
    return ParamBlock(sigmas, mus)


def decode_action(raw: torch.Tensor, m: int = 5, shared: bool = False) -> Action:
    """Split (p_terminate, parameter vector) into an Action; a1 = 1 when p_terminate > 0.5."""
    if raw.dim() == 1:
        raw = raw.unsqueeze(0)
    expected = 1 + (2 if shared else 2 * m)
    if raw.shape[-1] != expected:
        raise ValueError(f"expected {expected} raw action entries, got {raw.shape[-1]}")
    p_terminate = raw[:, 0]
    if bool((p_terminate < 0).any()) or bool((p_terminate > 1).any()):
        raise ValueError("termination probability must lie in [0, 1]")
    a2 = raw[:, 1:]
    _check_unit_interval(a2, "action parameters")
    return Action(a1=(p_terminate > 0.5).long(), a2=a2)


def discounted_return(records: Iterable[Union[TransitionRecord, float, torch.Tensor]], gamma: float) -> float:
    """sum_t gamma^t r_t over a trajectory, in order."""
    total, weight = 0.0, 1.0
    for record in records:
        reward = record.reward if isinstance(record, TransitionRecord) else record
        if reward is None:
            raise ValueError("trajectory contains a transition without reward")
        total += weight * float(reward)
        weight *= gamma
    return total


class PnPEnv:
    """Environment wrapping the solver, the denoiser prior and the reward."""

    def __init__(self, prior: Denoiser, config: Optional[EnvConfig] = None) -> None:
        self.prior = prior
        self.config = config or EnvConfig()

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def action_dim(self) -> int:
        return 2 if self.config.shared_params else 2 * self.config.m

    @property
    def observation_channels(self) -> int:
        return len(OBSERVATION_PLANES)

    def reset(self, x_gt: torch.Tensor, model: MeasurementModel, seed: int) -> EnvState:
        return self.reset_problem(make_problem(x_gt, model, seed))

    def reset_problem(self, problem: Problem, with_ground_truth: bool = True) -> EnvState:
        opt = initialize(problem.obs, problem.model)
        batch = opt.batch_size
        return EnvState(
            opt=opt,
            init=opt.x.clone(),
            obs=problem.obs,
            model=problem.model,
            x_gt=problem.x_gt if with_ground_truth else None,
            t=torch.zeros(batch, dtype=torch.long, device=opt.x.device),
            done=torch.zeros(batch, dtype=torch.bool, device=opt.x.device),
        )

    def observe(self, state: EnvState) -> torch.Tensor:
        """(B, 10, H, W) planes in OBSERVATION_PLANES order."""
        opt = state.opt
        batch, height, width = opt.x.shape
        real_dtype = opt.x.real.dtype
        planes = []
        for field_ in (opt.x, opt.z, opt.u, state.init):
            planes.extend([field_.real, field_.imag])
        noise = state.model.noise_level(batch).to(device=opt.x.device, dtype=real_dtype)
        progress = state.t.to(real_dtype) / self.horizon
        planes.append(noise.view(batch, 1, 1).expand(batch, height, width))
        planes.append(progress.view(batch, 1, 1).expand(batch, height, width))
        return torch.stack(planes, dim=1)

    def params(self, action: Action) -> ParamBlock:
        return decode_params(action.a2, self.m, self.config.sigma_max / 255.0, self.config.shared_params)

    def transition(self, state: EnvState, params: ParamBlock, callback=None) -> OptState:
        return run_block(state.opt, params, state.obs, state.model, self.prior, callback=callback)

    def score(self, state: EnvState, opt: Optional[OptState] = None) -> torch.Tensor:
        if state.x_gt is None:
            raise ValueError("PSNR needs the ground truth, which this state does not carry")
        return psnr((opt or state.opt).x, state.x_gt)

    def step(self, state: EnvState, action: Action, callback: Optional[Callable[[int, OptState], None]] = None) -> StepResult:
        """Terminate (a1 = 1, reward 0, state kept) or run one block (reward = PSNR gain - eta)."""
        if bool(state.done.all()):
            raise EpisodeFinishedError("every item of this episode is already done")
        a1 = action.a1.to(device=state.t.device).long()
        a1 = torch.where(state.t == 0, torch.zeros_like(a1), a1)
        terminate = (a1 == 1) & ~state.done
        proceed = ~terminate & ~state.done

        opt = state.opt
        if bool(proceed.any()):
            advanced = self.transition(state, self.params(action), callback=callback)
            opt = OptState.where(proceed, advanced, state.opt)

        reward = None
        if state.x_gt is not None:
            gain = self.score(state, opt) - self.score(state)
            reward = torch.where(proceed, gain - self.config.eta, torch.zeros_like(gain))

        t = state.t + proceed.long()
        done = state.done | terminate | (t >= self.horizon)
        return StepResult(replace(state, opt=opt, t=t, done=done), reward, done)


class TraceWriter:
    """Append TransitionRecords to a JSON Lines file."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = None

    def __enter__(self) -> "TraceWriter":
        self._file = open(self.path, "a", encoding="utf-8")
        return self

    def __exit__(self, *exc) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, record: TransitionRecord) -> None:
        if self._file is None:
            raise RuntimeError("TraceWriter used outside of its context")
        self._file.write(record.model_dump_json() + "\n")


@dataclass
class Episode:
    state: EnvState
    records: List[TransitionRecord] = field(default_factory=list)
    psnr_traces: List[List[float]] = field(default_factory=list)

    @property
    def blocks(self) -> torch.Tensor:
        return self.state.t

    def rewards(self, item: int = 0) -> List[float]:
        return [r.reward for r in self.records if r.episode == item and r.reward is not None]


def rollout(
    env: PnPEnv,
    state: EnvState,
    act: Callable[[EnvState], Action],
    writer: Optional[TraceWriter] = None,
    episode_offset: int = 0,
    on_iterate: Optional[Callable[[OptState], None]] = None,
) -> Episode:
    """Step until every item is done; record transitions and per-iteration PSNR traces.

    ``on_iterate`` sees the optimizer state after every inner iteration of a block.
    """
    batch = state.batch_size
    episode = Episode(state=state, psnr_traces=[[] for _ in range(batch)])
    has_gt = state.x_gt is not None

    while not bool(state.done.all()):
        with torch.no_grad():
            action = act(state)
            terminating = (action.a1.to(state.t.device) == 1) & (state.t > 0)
            running = (~state.done & ~terminating).tolist()

            def record_iterate(_: int, opt: OptState) -> None:
                if on_iterate is not None:
                    on_iterate(opt)
                if has_gt:
                    scores = psnr(opt.x, state.x_gt).tolist()
                    for i in range(batch):
                        if running[i]:
                            episode.psnr_traces[i].append(scores[i])

            before = env.score(state).tolist() if has_gt else [None] * batch
            result = env.step(state, action, callback=record_iterate)
            after = env.score(result.state).tolist() if has_gt else [None] * batch
            params = env.params(action)
        for i in range(batch):
            if bool(state.done[i]):
                continue
            proceeded = running[i]
            record = TransitionRecord(
                episode=episode_offset + i,
                t=int(state.t[i]),
                a1=0 if proceeded else 1,
                sigmas=(params.sigmas[i] * 255.0).tolist() if proceeded else [],
                mus=params.mus[i].tolist() if proceeded else [],
                reward=None if result.reward is None else float(result.reward[i]),
                psnr_before=before[i],
                psnr_after=after[i],
                inner_iterations=int(result.state.opt.k[i]),
                done=bool(result.done[i]),
            )
            episode.records.append(record)
            if writer is not None:
                writer.write(record)
        state = result.state
    episode.state = state
    return episode
