from __future__ import annotations

import hashlib
import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import toml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

MAX_ITERATIONS = 30  # inner ADMM iterations any reconstruction may use


class Settings(BaseSettings):
    """Runtime configuration loaded from environment variables and .env file."""

    model_config = SettingsConfigDict(env_prefix="TFPNP_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    # General
    app_name: str = "tunefree-pnp"
    log_level: str = "INFO"
    log_file: Optional[str] = None

    # Output root override; takes precedence over relative output_dir values
    output_root: Optional[Path] = None

    # Compute
    device: str = "cpu"
    dtype: Literal["float32", "float64"] = "float32"
    num_workers: int = 4


settings = Settings()


def get_settings() -> Settings:
    """Get settings instance (for dependency injection)"""
    return settings


class Task(str, Enum):
    CSMRI = "csmri"
    PR = "pr"


class SamplingPattern(str, Enum):
    RADIAL = "radial"
    UNIFORM_RANDOM = "uniform-random"


class ProblemConfig(BaseModel):
    task: Task = Task.CSMRI
    image_size: int = Field(128, ge=8, description="Side length images are resized/center-cropped to")
    accelerations: List[float] = Field(default_factory=lambda: [2.0, 4.0, 8.0])
    sigma_ns: List[float] = Field(default_factory=lambda: [5.0, 10.0, 15.0], description="CS-MRI noise std, 8-bit units")
    alphas: List[float] = Field(default_factory=lambda: [9.0, 27.0, 81.0], description="CDP noise scales")
    mask_pattern: SamplingPattern = SamplingPattern.RADIAL
    mask_seed: int = 0
    mask_dir: Optional[Path] = None
    num_patterns: int = Field(4, ge=1)
    noise_peak: float = Field(255.0, gt=0, description="Intensity scale the CDP noise law is applied on")

    @field_validator("accelerations", "sigma_ns", "alphas")
    @classmethod
    def _non_empty(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("grid must not be empty")
        return value

    @field_validator("accelerations")
    @classmethod
    def _acceleration_range(cls, value: List[float]) -> List[float]:
        for factor in value:
            if factor < 1.0:
                raise ValueError(f"acceleration factor must be >= 1, got {factor}")
        return value


class EnvConfig(BaseModel):
    m: int = Field(5, ge=1, description="ADMM iterations per transition block")
    horizon: int = Field(6, ge=1, description="Maximum number of blocks N")
    eta: float = Field(0.05, ge=0, description="Continuation penalty in dB")
    gamma: float = Field(0.99, ge=0, le=1)
    shared_params: bool = False
    sigma_max: float = Field(50.0, gt=0, description="Upper end of the decoded denoising strength, 8-bit units")


class DenoiserTrainingConfig(BaseModel):
    corpus_dir: Optional[Path] = None
    patch_size: int = Field(128, ge=8)
    patch_stride: int = Field(32, ge=1)
    max_patches: Optional[int] = None
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-4, gt=0)
    lr_halve_epoch: int = 30
    lr_final_epoch: int = 40
    lr_final: float = Field(1e-5, gt=0)
    sigma_min: float = Field(1.0, gt=0, description="8-bit units")
    sigma_max: float = Field(50.0, gt=0, description="8-bit units")
    seed: int = 0

    @model_validator(mode="after")
    def _sigma_order(self) -> "DenoiserTrainingConfig":
        if self.sigma_max < self.sigma_min:
            raise ValueError("sigma_max must be >= sigma_min")
        return self


class DenoiserConfig(BaseModel):
    checkpoint: Optional[Path] = None
    widths: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    convs_per_scale: int = Field(2, ge=1)
    training: DenoiserTrainingConfig = Field(default_factory=DenoiserTrainingConfig)


class AgentConfig(BaseModel):
    train_dir: Optional[Path] = None
    snapshot: Optional[Path] = None
    batch_size: int = Field(48, ge=1)
    episodes_per_iteration: int = Field(48, ge=1)
    iterations: int = Field(1500, ge=1)
    gradient_steps: int = Field(10, ge=1)
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    policy_lr_decayed: float = 1e-4
    value_lr_decayed: float = 3e-4
    lr_decay_iteration: int = 1000
    q_lr: float = 1e-3
    ema_rate: float = Field(0.005, ge=0, le=1)
    buffer_multiplier: int = Field(10, ge=1)
    trunk_widths: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    blocks_per_stage: int = Field(1, ge=1)
    head_hidden: int = Field(128, ge=1)
    pi2_mode: Literal["model_based", "model_free"] = "model_based"
    termination_mode: Literal["greedy", "sample"] = "greedy"
    checkpoint_every: int = Field(100, ge=1)
    seed: int = 0

    @property
    def buffer_capacity(self) -> int:
        return self.buffer_multiplier * self.batch_size


class EvaluationConfig(BaseModel):
    test_dir: Optional[Path] = None
    policies: List[str] = Field(
        default_factory=lambda: ["fixed", "fixed*", "handcrafted", "handcrafted*", "fixed_optimal", "fixed_optimal*", "oracle", "oracle*"]
    )
    fixed_sigma: float = Field(15.0, gt=0, description="8-bit units")
    fixed_mu: float = Field(0.1, gt=0)
    sigma_grid: List[float] = Field(default_factory=lambda: [1, 3, 5, 7, 10, 15, 20, 25, 30, 40, 50])
    mu_grid: List[float] = Field(default_factory=lambda: [0.01, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0])
    max_iterations: int = Field(MAX_ITERATIONS, ge=1)
    handcrafted_sigma_start: float = 35.0
    handcrafted_lambda: float = 0.23
    seeds: List[int] = Field(default_factory=lambda: [0])
    timing: bool = True

    @field_validator("sigma_grid", "mu_grid", "seeds", "policies")
    @classmethod
    def _non_empty(cls, value: list) -> list:
        if not value:
            raise ValueError("grid must not be empty")
        return value

    @field_validator("policies")
    @classmethod
    def _known_policies(cls, value: List[str]) -> List[str]:
        known = {"fixed", "handcrafted", "fixed_optimal", "oracle", "learned"}
        for name in value:
            if name.rstrip("*") not in known:
                raise ValueError(f"unknown policy '{name}'")
        return value


class ExperimentConfig(BaseModel):
    name: str = "default"
    output_dir: Path = Path("runs/default")
    seed: int = 0
    problems: ProblemConfig = Field(default_factory=ProblemConfig)
    env: EnvConfig = Field(default_factory=EnvConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def _iteration_budget(self) -> "ExperimentConfig":
        if self.evaluation.max_iterations > MAX_ITERATIONS:
            raise ValueError(f"evaluation.max_iterations={self.evaluation.max_iterations} exceeds {MAX_ITERATIONS}")
        if self.env.m * self.env.horizon > MAX_ITERATIONS:
            raise ValueError(f"env.m * env.horizon = {self.env.m * self.env.horizon} exceeds {MAX_ITERATIONS} iterations")
        return self

    def resolved_output_dir(self) -> Path:
        root = settings.output_root
        if root is not None and not self.output_dir.is_absolute():
            return Path(root) / self.output_dir
        return self.output_dir

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def require_paths(self, *dotted: str) -> None:
        """Raise ConfigError unless every named path option is set and exists."""
        missing = []
        for key in dotted:
            value: Any = self
            for part in key.split("."):
                value = getattr(value, part)
            if value is None:
                missing.append(f"{key} is not set")
            elif not Path(value).exists():
                missing.append(f"{key}={value} does not exist")
        if missing:
            raise ConfigError("; ".join(missing))


def _set_dotted(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_config(path: Optional[os.PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a TOML experiment file, apply dotted overrides and validate."""
    tree: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            tree = toml.load(path)
        except toml.TomlDecodeError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    for key, value in (overrides or {}).items():
        _set_dotted(tree, key, value)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        messages = [
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" if err["loc"] else err["msg"] for err in e.errors()
        ]
        raise ConfigError("invalid config: " + "; ".join(messages)) from e


def dump_config(config: ExperimentConfig, path: os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(toml.dumps(config.model_dump(mode="json", exclude_none=True)), encoding="utf-8")
    return path


def iter_config_keys(model: type = ExperimentConfig, prefix: str = "") -> List[Tuple[str, Any]]:
    """List (dotted key, annotation) for every leaf option of a config model."""
    keys: List[Tuple[str, Any]] = []
    for name, field in model.model_fields.items():
        annotation = field.annotation
        dotted = f"{prefix}{name}"
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            keys.extend(iter_config_keys(annotation, prefix=f"{dotted}."))
        else:
            keys.append((dotted, annotation))
    return keys
