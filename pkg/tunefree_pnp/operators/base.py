from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, TypeVar, Union

import torch

from ..errors import ShapeMismatchError

M = TypeVar("M", bound="MeasurementModel")

Scalar = Union[float, torch.Tensor]


def as_batch(value: Scalar, like: torch.Tensor, trailing: int = 2) -> torch.Tensor:
    """Broadcast a scalar or per-item vector (B,) against ``like`` (B, ..., H, W)."""
    real_dtype = like.real.dtype if like.is_complex() else like.dtype
    value = torch.as_tensor(value, dtype=real_dtype, device=like.device)
    if value.dim() == 0:
        return value
    return value.reshape(value.shape + (1,) * trailing)


def check_image(x: torch.Tensor) -> torch.Tensor:
    """Validate an image field: (..., H, W) with H, W >= 8 and finite entries."""
    if x.dim() < 2:
        raise ShapeMismatchError(f"image needs at least 2 dims, got shape {tuple(x.shape)}")
    if x.shape[-1] < 8 or x.shape[-2] < 8:
        raise ShapeMismatchError(f"image grid must be at least 8x8, got {tuple(x.shape[-2:])}")
    if not torch.isfinite(torch.view_as_real(x) if x.is_complex() else x).all():
        raise ValueError("image contains non-finite entries")
    return x


def to_complex(x: torch.Tensor) -> torch.Tensor:
    if x.is_complex():
        return x
    dtype = torch.complex128 if x.dtype == torch.float64 else torch.complex64
    return x.to(dtype)


@dataclass(frozen=True)
class Observation:
    """Measured data. CS-MRI: masked k-space (B, H, W). CDP: amplitudes (B, P, H, W)."""

    y: torch.Tensor

    def select(self, index: Sequence[int]) -> "Observation":
        return Observation(self.y[list(index)])

    @staticmethod
    def stack(items: Sequence["Observation"]) -> "Observation":
        return Observation(torch.cat([o.y for o in items], dim=0))

    def detach(self) -> "Observation":
        return Observation(self.y.detach())


class MeasurementModel(ABC):
    """Forward model of one inverse problem, batched over a leading axis."""

    task: str = ""

    @abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Noiseless measurement of x."""
        raise NotImplementedError

    @abstractmethod
    def synthesize(self, x: torch.Tensor, seed: int) -> Observation:
        """Noisy measurement of x, deterministic per seed."""
        raise NotImplementedError

    @abstractmethod
    def data_prox(self, v: torch.Tensor, obs: Observation, mu: Scalar) -> torch.Tensor:
        """(Possibly inexact) proximal step on the data-fidelity term anchored at v."""
        raise NotImplementedError

    @abstractmethod
    def initialize(self, obs: Observation) -> torch.Tensor:
        """Starting image x0 = z0 built from the measurement."""
        raise NotImplementedError

    @abstractmethod
    def noise_level(self, batch: int) -> torch.Tensor:
        """Per-item measurement noise in normalized units, (B,)."""
        raise NotImplementedError

    @property
    @abstractmethod
    def nominal_noise(self) -> torch.Tensor:
        """Per-item noise level in 8-bit units (0 where the model has none)."""
        raise NotImplementedError

    @abstractmethod
    def select(self: M, index: Sequence[int]) -> M:
        raise NotImplementedError

    @classmethod
    @abstractmethod
    def stack(cls: type[M], items: Sequence[M]) -> M:
        raise NotImplementedError

    @abstractmethod
    def expand(self: M, batch: int) -> M:
        """Materialize per-item parameters for a batch of the given size."""
        raise NotImplementedError


@dataclass(frozen=True)
class Problem:
    """A ground-truth image together with its measurement model and observation."""

    x_gt: torch.Tensor
    model: MeasurementModel
    obs: Observation
    seed: int = 0
    image_id: Optional[str] = None


def make_problem(x_gt: torch.Tensor, model: MeasurementModel, seed: int, image_id: Optional[str] = None) -> Problem:
    x_gt = to_complex(check_image(x_gt))
    if x_gt.dim() == 2:
        x_gt = x_gt.unsqueeze(0)
    model = model.expand(x_gt.shape[0])
    return Problem(x_gt=x_gt, model=model, obs=model.synthesize(x_gt, seed), seed=seed, image_id=image_id)
