from __future__ import annotations

from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from .config import MAX_ITERATIONS

# Column order of results.csv
RESULT_COLUMNS = [
    "image_id",
    "task",
    "accel_or_alpha",
    "sigma_n",
    "policy",
    "seed",
    "psnr_db",
    "iterations",
    "wall_time_s",
]


class PolicyKind(str, Enum):
    FIXED = "fixed"
    HANDCRAFTED = "handcrafted"
    FIXED_OPTIMAL = "fixed_optimal"
    ORACLE = "oracle"
    LEARNED = "learned"


class PolicySpec(BaseModel):
    kind: PolicyKind
    early_stop: bool = Field(False, description="Report the best iterate of the trace (starred variant)")
    params: Dict[str, Any] = Field(default_factory=dict)
    max_inner_iterations: int = Field(MAX_ITERATIONS, ge=1, le=MAX_ITERATIONS)

    @property
    def name(self) -> str:
        return self.kind.value + ("*" if self.early_stop else "")

    @classmethod
    def parse(cls, name: str, **kwargs: Any) -> "PolicySpec":
        early_stop = name.endswith("*")
        return cls(kind=PolicyKind(name.rstrip("*")), early_stop=early_stop, **kwargs)


class ResultRecord(BaseModel):
    image_id: str
    task: str
    accel_or_alpha: float
    sigma_n: float
    policy: str
    seed: int
    psnr_db: float
    iterations: int = Field(..., ge=0, le=MAX_ITERATIONS)
    wall_time_s: float = 0.0

    @field_validator("psnr_db")
    @classmethod
    def _finite(cls, value: float) -> float:
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("psnr_db must be finite")
        return value

    def row(self) -> List[Any]:
        return [getattr(self, name) for name in RESULT_COLUMNS]


class CurveRecord(BaseModel):
    """PSNR-vs-iteration trace of one reconstruction, stored next to results.csv."""

    image_id: str
    task: str
    accel_or_alpha: float
    sigma_n: float
    policy: str
    seed: int
    psnr_trace: List[float]


class TransitionRecord(BaseModel):
    """One MDP transition summarised for episode traces (one JSON object per line)."""

    episode: int = 0
    t: int
    a1: int
    sigmas: List[float] = Field(default_factory=list)
    mus: List[float] = Field(default_factory=list)
    reward: Optional[float] = None
    psnr_before: Optional[float] = None
    psnr_after: Optional[float] = None
    inner_iterations: int = 0
    done: bool = False


class TrainingLogRecord(BaseModel):
    iteration: int
    mean_reward: float
    value_loss: float
    mean_episode_length: float
    pi1_loss: Optional[float] = None
    pi2_objective: Optional[float] = None


class DenoiserEpochRecord(BaseModel):
    epoch: int
    train_loss: float
    lr: float


class SearchRecord(BaseModel):
    image_id: str
    setting: str
    search: str
    sigma: float = Field(..., description="8-bit units")
    mu: float
    psnr_trace: List[float]


class DenoiserCheckpointMeta(BaseModel):
    sigma_range: Tuple[float, float]
    architecture: Dict[str, Any]
    architecture_hash: str
    training_config: Dict[str, Any] = Field(default_factory=dict)
    epoch: int = 0
    epoch_losses: List[float] = Field(default_factory=list)


class SnapshotMeta(BaseModel):
    step: int
    iteration: int
    config_hash: str
    network: Dict[str, Any]
    env: Dict[str, Any]
    task: str


class DenoiserProfile(BaseModel):
    denoising_psnr: float
    pnp_psnr: float
    runtime_ms: float
    sigma: float = Field(..., description="8-bit units")
    best_sigma: float
    best_mu: float
