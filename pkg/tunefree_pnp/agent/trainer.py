"""Mixed model-free / model-based actor-critic training.

Each gradient step draws states from the buffer and
  - regresses V_phi(s) onto r + gamma * V_target(s') (value_update),
  - ascends log pi1(a1|s) * advantage for the termination head (policy_update_pi1),
  - ascends r + gamma * V_phi(p(s, pi2(s))) by backpropagating through the
    environment transition for the parameter head (policy_update_pi2),
  - moves the target value network towards the value network (ema_update).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import torch
from pydantic import BaseModel
from torch import nn
from tqdm import tqdm

from ..config import AgentConfig, ExperimentConfig
from ..datasets import LoadedImage, ProblemSampler
from ..denoisers.base import Denoiser
from ..env import Action, EnvState, PnPEnv
from ..models import SnapshotMeta, TrainingLogRecord
from ..operators.base import Problem
from .buffer import StateBuffer
from .networks import SQUASH_EPS, PolicyNetwork, QNetwork, ValueNetwork

logger = logging.getLogger(__name__)


@torch.no_grad()
def ema_update(value: nn.Module, target: nn.Module, rate: float) -> nn.Module:
    """target <- (1 - rate) * target + rate * value, parameter by parameter."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"EMA rate must lie in [0, 1], got {rate}")
    value_params = list(value.parameters())
    target_params = list(target.parameters())
    if len(value_params) != len(target_params):
        raise ValueError(f"value and target networks differ in parameter count ({len(value_params)} vs {len(target_params)})")
    for v, t in zip(value_params, target_params):
        if v.shape != t.shape:
            raise ValueError(f"value and target parameter shapes differ: {tuple(v.shape)} vs {tuple(t.shape)}")
    for v, t in zip(value_params, target_params):
        t.mul_(1.0 - rate).add_(v, alpha=rate)
    return target


class UpdateRecord(BaseModel):
    value_loss: float
    pi1_loss: float
    pi2_objective: float
    q_loss: Optional[float] = None


@dataclass(frozen=True)
class Transition:
    state: EnvState
    action: Action
    next_state: EnvState
    reward: torch.Tensor
    done: torch.Tensor


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class PolicySnapshot:
    """Weights of policy, value and target-value networks with their training counters."""

    policy: Dict[str, Any]
    value: Dict[str, Any]
    target_value: Dict[str, Any]
    meta: SnapshotMeta
    q: Optional[Dict[str, Any]] = None
    optimizers: Optional[Dict[str, Any]] = None

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "policy": self.policy,
            "value": self.value,
            "target_value": self.target_value,
            "q": self.q,
            "optimizers": self.optimizers,
            "meta": self.meta.model_dump(mode="json"),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        path.with_suffix(".json").write_text(self.meta.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], map_location: Union[str, torch.device] = "cpu") -> "PolicySnapshot":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"policy snapshot not found: {path}")
        payload = torch.load(path, map_location=map_location)
        return cls(
            policy=payload["policy"],
            value=payload["value"],
            target_value=payload["target_value"],
            meta=SnapshotMeta.model_validate(payload["meta"]),
            q=payload.get("q"),
            optimizers=payload.get("optimizers"),
        )

    def build_policy(self, dtype: torch.dtype = torch.float32) -> PolicyNetwork:
        network = self.meta.network
        policy = PolicyNetwork(
            in_channels=network["in_channels"],
            action_dim=network["action_dim"],
            trunk_widths=network["trunk_widths"],
            blocks_per_stage=network["blocks_per_stage"],
            head_hidden=network["head_hidden"],
        )
        policy.load_state_dict(self.policy)
        policy.to(dtype).eval()
        for p in policy.parameters():
            p.requires_grad_(False)
        return policy


class LearnedPolicy:
    """Acts with a trained PolicyNetwork; termination is greedy (p > 0.5) or sampled."""

    def __init__(self, env: PnPEnv, policy: PolicyNetwork, termination_mode: str = "greedy", seed: int = 0) -> None:
        self.env = env
        self.policy = policy
        self.termination_mode = termination_mode
        self.generator = torch.Generator().manual_seed(seed)

    @classmethod
    def from_snapshot(cls, env: PnPEnv, path: Union[str, Path], termination_mode: str = "greedy") -> "LearnedPolicy":
        snapshot = PolicySnapshot.load(path)
        if snapshot.meta.env.get("m") != env.m or snapshot.meta.network["action_dim"] != env.action_dim:
            raise ValueError(f"snapshot {path} was trained for a different action layout ({snapshot.meta.env})")
        return cls(env, snapshot.build_policy(), termination_mode)

    def episode(self, seed: int) -> "LearnedPolicy":
        """Same network with a fresh termination generator seeded with ``seed``."""
        return type(self)(self.env, self.policy, self.termination_mode, seed)

    @torch.no_grad()
    def __call__(self, state: EnvState) -> Action:
        dtype = next(self.policy.parameters()).dtype
        out = self.policy(self.env.observe(state).to(dtype))
        p = out.p_terminate
        if self.termination_mode == "sample":
            a1 = torch.bernoulli(p.cpu(), generator=self.generator).long().to(p.device)
        else:
            a1 = (p > 0.5).long()
        return Action(a1=a1, a2=out.raw_params.to(state.opt.x.real.dtype))


class PolicyTrainer:
    def __init__(
        self,
        env: PnPEnv,
        config: Optional[AgentConfig] = None,
        device: Union[str, torch.device] = "cpu",
        dtype: torch.dtype = torch.float32,
    ) -> None:
        self.env = env
        self.config = config or AgentConfig()
        self.device = torch.device(device)
        self.dtype = dtype
        cfg = self.config

        torch.manual_seed(cfg.seed)
        channels = env.observation_channels
        trunk = dict(trunk_widths=cfg.trunk_widths, blocks_per_stage=cfg.blocks_per_stage, head_hidden=cfg.head_hidden)
        self.policy = PolicyNetwork(channels, env.action_dim, **trunk).to(self.device, dtype)
        self.value = ValueNetwork(channels, **trunk).to(self.device, dtype)
        self.target_value = copy.deepcopy(self.value)
        for p in self.target_value.parameters():
            p.requires_grad_(False)
        self.q: Optional[QNetwork] = None
        if cfg.pi2_mode == "model_free":
            self.q = QNetwork(channels, env.action_dim, **trunk).to(self.device, dtype)

        self.pi1_optimizer = torch.optim.Adam(list(self.policy.pi1_parameters()), lr=cfg.policy_lr)
        self.pi2_optimizer = torch.optim.Adam(list(self.policy.pi2_parameters()), lr=cfg.policy_lr)
        self.value_optimizer = torch.optim.Adam(self.value.parameters(), lr=cfg.value_lr)
        self.q_optimizer = torch.optim.Adam(self.q.parameters(), lr=cfg.q_lr) if self.q is not None else None

        self.buffer = StateBuffer(cfg.buffer_capacity, seed=cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.iteration = 0

    # acting

    def observe(self, state: EnvState) -> torch.Tensor:
        return self.env.observe(state).to(self.device, self.dtype)

    def act(self, state: EnvState, mode: str = "sample") -> Action:
        with torch.no_grad():
            out = self.policy(self.observe(state))
        p = out.p_terminate.cpu()
        if mode == "sample":
            a1 = torch.bernoulli(p, generator=self.generator).long()
        else:
            a1 = (p > 0.5).long()
        return Action(a1=a1.to(state.t.device), a2=out.raw_params.to(state.opt.x.real.dtype))

    def random_action(self, state: EnvState) -> Action:
        batch = state.batch_size
        a1 = torch.bernoulli(torch.full((batch,), 0.5), generator=self.generator).long()
        raw = torch.rand((batch, self.env.action_dim), generator=self.generator, dtype=torch.float64)
        a2 = SQUASH_EPS + (1.0 - 2.0 * SQUASH_EPS) * raw
        return Action(a1=a1.to(state.t.device), a2=a2.to(device=state.opt.x.device, dtype=state.opt.x.real.dtype))

    # updates

    def sample_transition(self, states: EnvState, action: Optional[Action] = None) -> Transition:
        """One environment step from ``states`` under the current policy (no gradient)."""
        with torch.no_grad():
            action = action or self.act(states, mode="sample")
            next_state, reward, done = self.env.step(states, action)
        if reward is None:
            raise ValueError("training transitions need ground-truth images")
        return Transition(states, action, next_state, reward.to(self.device, self.dtype), done.to(self.device))

    def _bootstrap(self, transition: Transition, network: nn.Module) -> torch.Tensor:
        not_done = (~transition.done).to(self.dtype)
        return transition.reward + self.env.config.gamma * not_done * network(self.observe(transition.next_state))

    def value_loss(self, transition: Transition) -> torch.Tensor:
        """mean 1/2 (r + gamma * V_target(s') - V(s))^2, differentiable in V only."""
        with torch.no_grad():
            target = self._bootstrap(transition, self.target_value)
        estimate = self.value(self.observe(transition.state))
        return 0.5 * ((target - estimate) ** 2).mean()

    def value_update(self, transition: Transition) -> float:
        """One step on the value loss; the target network is left alone."""
        loss = self.value_loss(transition)
        self.value_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.value_optimizer.step()
        return float(loss.item())

    def advantage(self, transition: Transition) -> torch.Tensor:
        with torch.no_grad():
            return self._bootstrap(transition, self.target_value) - self.value(self.observe(transition.state))

    def pi1_loss(self, states: EnvState, a1: torch.Tensor, advantage: torch.Tensor) -> torch.Tensor:
        """-mean(log pi1(a1|s) * A) over states where termination is allowed (t > 0)."""
        out = self.policy(self.observe(states))
        allowed = (states.t.to(self.device) > 0).to(self.dtype)
        weighted = out.log_prob(a1.to(self.device)) * advantage.detach() * allowed
        return -weighted.sum() / allowed.sum().clamp(min=1.0)

    def policy_update_pi1(self, transition: Transition, advantage: Optional[torch.Tensor] = None) -> float:
        if transition.state.batch_size == 0:
            raise ValueError("empty batch")
        advantage = self.advantage(transition) if advantage is None else advantage
        loss = self.pi1_loss(transition.state, transition.action.a1, advantage)
        self.pi1_optimizer.zero_grad(set_to_none=True)
        loss.backward(inputs=list(self.policy.pi1_parameters()))
        self.pi1_optimizer.step()
        return float(loss.item())

    def pi2_objective(self, states: EnvState) -> torch.Tensor:
        """mean(r(s, a) + gamma * V(p(s, a))) with a2 = pi2(s), differentiable through the environment."""
        out = self.policy(self.observe(states))
        continue_ = torch.zeros(states.batch_size, dtype=torch.long, device=states.t.device)
        action = Action(a1=continue_, a2=out.raw_params.to(states.opt.x.real.dtype))
        next_state, reward, done = self.env.step(states, action)
        if reward is None:
            raise ValueError("the model-based update needs ground truth to differentiate the reward")
        not_done = (~done.to(self.device)).to(self.dtype)
        q = reward.to(self.device, self.dtype) + self.env.config.gamma * not_done * self.value(self.observe(next_state))
        return q.mean()

    def policy_update_pi2(self, states: EnvState) -> float:
        if self.config.pi2_mode == "model_free":
            out = self.policy(self.observe(states))
            objective = self.q(self.observe(states), out.raw_params).mean()
        else:
            objective = self.pi2_objective(states)
        self.pi2_optimizer.zero_grad(set_to_none=True)
        (-objective).backward(inputs=list(self.policy.pi2_parameters()))
        self.pi2_optimizer.step()
        return float(objective.item())

    def q_update(self, transition: Transition) -> float:
        """Regress Q(s, a2) on the bootstrapped target, only over transitions that ran a block."""
        with torch.no_grad():
            target = self._bootstrap(transition, self.target_value)
        estimate = self.q(self.observe(transition.state), transition.action.a2.to(self.device, self.dtype))
        state = transition.state
        ran = ((transition.action.a1.to(state.t.device) == 0) | (state.t == 0)).to(self.device, self.dtype)
        loss = 0.5 * (((target - estimate) ** 2) * ran).sum() / ran.sum().clamp(min=1.0)
        self.q_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.q_optimizer.step()
        return float(loss.item())

    def gradient_step(self) -> UpdateRecord:
        states = self.buffer.sample(self.config.batch_size)
        transition = self.sample_transition(states)
        advantage = self.advantage(transition)
        value_loss = self.value_update(transition)
        pi1_loss = self.policy_update_pi1(transition, advantage)
        q_loss = self.q_update(transition) if self.q is not None else None
        pi2_objective = self.policy_update_pi2(states)
        ema_update(self.value, self.target_value, self.config.ema_rate)
        self.step += 1
        return UpdateRecord(value_loss=value_loss, pi1_loss=pi1_loss, pi2_objective=pi2_objective, q_loss=q_loss)

    # collection and the outer loop

    def collect(self, problem: Problem, explore_randomly: bool = False) -> Tuple[float, float]:
        """Run one batch of episodes, pushing every visited state; returns (mean reward, mean length)."""
        state = self.env.reset_problem(problem)
        total_reward = torch.zeros(state.batch_size, dtype=torch.float64)
        while not bool(state.done.all()):
            self.buffer.push(state)
            action = self.random_action(state) if explore_randomly else self.act(state, mode="sample")
            with torch.no_grad():
                state, reward, _ = self.env.step(state, action)
            total_reward += reward.detach().cpu().double()
        return float(total_reward.mean()), float(state.t.double().mean())

    def apply_lr_schedule(self, iteration: int) -> None:
        cfg = self.config
        decayed = iteration >= cfg.lr_decay_iteration
        _set_lr(self.pi1_optimizer, cfg.policy_lr_decayed if decayed else cfg.policy_lr)
        _set_lr(self.pi2_optimizer, cfg.policy_lr_decayed if decayed else cfg.policy_lr)
        _set_lr(self.value_optimizer, cfg.value_lr_decayed if decayed else cfg.value_lr)

    def train(
        self,
        sampler: ProblemSampler,
        output_dir: Optional[Union[str, Path]] = None,
        config_hash: str = "",
        task: str = "",
        iterations: Optional[int] = None,
        on_iteration: Optional[Callable[[TrainingLogRecord], None]] = None,
    ) -> PolicySnapshot:
        cfg = self.config
        iterations = iterations or cfg.iterations
        output_dir = Path(output_dir) if output_dir is not None else None
        log_path = output_dir / "policy_train_log.jsonl" if output_dir is not None else None
        if output_dir is not None:
            output_dir.mkdir(parents=True, exist_ok=True)

        for iteration in tqdm(range(self.iteration, iterations), desc="policy iterations", leave=False):
            self.apply_lr_schedule(iteration)
            problem = sampler.sample(cfg.episodes_per_iteration, draw=iteration)
            warmup = len(self.buffer) < cfg.batch_size
            mean_reward, mean_length = self.collect(problem, explore_randomly=warmup)
            updates: List[UpdateRecord] = [self.gradient_step() for _ in range(cfg.gradient_steps)]
            self.iteration = iteration + 1

            record = TrainingLogRecord(
                iteration=self.iteration,
                mean_reward=mean_reward,
                value_loss=sum(u.value_loss for u in updates) / len(updates),
                mean_episode_length=mean_length,
                pi1_loss=sum(u.pi1_loss for u in updates) / len(updates),
                pi2_objective=sum(u.pi2_objective for u in updates) / len(updates),
            )
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as f:
                    f.write(record.model_dump_json() + "\n")
            if on_iteration is not None:
                on_iteration(record)
            logger.debug(f"Iteration {self.iteration}: reward {mean_reward:.3f}, value loss {record.value_loss:.4f}, length {mean_length:.2f}")
            if output_dir is not None and self.iteration % cfg.checkpoint_every == 0:
                self.snapshot(config_hash, task).save(output_dir / f"policy_iter{self.iteration:05d}.pt")

        snapshot = self.snapshot(config_hash, task)
        if output_dir is not None:
            path = snapshot.save(output_dir / "policy_final.pt")
            logger.info(f"Saved final policy snapshot to {path}")
        return snapshot

    # persistence

    def snapshot(self, config_hash: str = "", task: str = "") -> PolicySnapshot:
        optimizers = {
            "pi1": self.pi1_optimizer.state_dict(),
            "pi2": self.pi2_optimizer.state_dict(),
            "value": self.value_optimizer.state_dict(),
        }
        if self.q_optimizer is not None:
            optimizers["q"] = self.q_optimizer.state_dict()
        meta = SnapshotMeta(
            step=self.step,
            iteration=self.iteration,
            config_hash=config_hash,
            network={**self.policy.description, "pi2_mode": self.config.pi2_mode},
            env=self.env.config.model_dump(mode="json"),
            task=task,
        )
        return PolicySnapshot(
            policy=copy.deepcopy(self.policy.state_dict()),
            value=copy.deepcopy(self.value.state_dict()),
            target_value=copy.deepcopy(self.target_value.state_dict()),
            meta=meta,
            q=copy.deepcopy(self.q.state_dict()) if self.q is not None else None,
            optimizers=optimizers,
        )

    def restore(self, snapshot: PolicySnapshot) -> None:
        self.policy.load_state_dict(snapshot.policy)
        self.value.load_state_dict(snapshot.value)
        self.target_value.load_state_dict(snapshot.target_value)
        if self.q is not None and snapshot.q is not None:
            self.q.load_state_dict(snapshot.q)
        if snapshot.optimizers:
            self.pi1_optimizer.load_state_dict(snapshot.optimizers["pi1"])
            self.pi2_optimizer.load_state_dict(snapshot.optimizers["pi2"])
            self.value_optimizer.load_state_dict(snapshot.optimizers["value"])
            if self.q_optimizer is not None and "q" in snapshot.optimizers:
                self.q_optimizer.load_state_dict(snapshot.optimizers["q"])
        self.step = snapshot.meta.step
        self.iteration = snapshot.meta.iteration
        logger.info(f"Restored policy training state at iteration {self.iteration} (step {self.step})")


def train_policy(
    images: List[LoadedImage],
    config: ExperimentConfig,
    prior: Denoiser,
    output_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float32,
) -> PolicySnapshot:
    """Train pi1, pi2 and the value networks on problems sampled from ``images``."""
    if not images:
        raise ValueError("empty training dataset")
    env = PnPEnv(prior, config.env)
    trainer = PolicyTrainer(env, config.agent, device=device, dtype=dtype)
    if resume_from is not None:
        trainer.restore(PolicySnapshot.load(resume_from, map_location=device))
    sampler = ProblemSampler(images, config.problems, seed=config.agent.seed, dtype=dtype)
    logger.info(
        f"Training policy on {len(images)} images, {len(sampler.settings)} settings, "
        f"{config.agent.iterations} iterations ({config.env.m} iterations per block, horizon {config.env.horizon})"
    )
    return trainer.train(sampler, output_dir, config_hash=config.config_hash(), task=config.problems.task.value)
