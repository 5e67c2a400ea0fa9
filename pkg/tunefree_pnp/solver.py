"""PnP-ADMM iterations with the regularizer prox replaced by a denoiser.

    x_{k+1} = H_sigma(z_k - u_k)
    z_{k+1} = prox_{D / mu}(x_{k+1} + u_k)
    u_{k+1} = u_k + x_{k+1} - z_{k+1}

Every function returns new values; tensors keep their autograd history so
a block of iterations can be differentiated with respect to (sigma, mu).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch

from .denoisers.base import Denoiser
from .errors import ShapeMismatchError
from .operators.base import MeasurementModel, Observation, to_complex
from .operators.cdp import data_prox_pr
from .operators.csmri import data_prox_csmri

__all__ = [
    "OptState",
    "ParamBlock",
    "admm_iterate",
    "data_prox",
    "data_prox_csmri",
    "data_prox_pr",
    "denoiser_step",
    "initialize",
    "run_block",
]

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class OptState:
    x: torch.Tensor
    z: torch.Tensor
    u: torch.Tensor
    k: torch.Tensor  # (B,) inner-iteration counters

    def __post_init__(self) -> None:
        if not (self.x.shape == self.z.shape == self.u.shape):
            raise ShapeMismatchError(f"x, z, u shapes differ: {tuple(self.x.shape)}, {tuple(self.z.shape)}, {tuple(self.u.shape)}")

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    def detach(self) -> "OptState":
        return OptState(self.x.detach(), self.z.detach(), self.u.detach(), self.k.detach())

    def select(self, index: Sequence[int]) -> "OptState":
        index = list(index)
        return OptState(self.x[index], self.z[index], self.u[index], self.k[index])

    @staticmethod
    def stack(items: Sequence["OptState"]) -> "OptState":
        return OptState(
            torch.cat([s.x for s in items]),
            torch.cat([s.z for s in items]),
            torch.cat([s.u for s in items]),
            torch.cat([s.k for s in items]),
        )

    @staticmethod
    def where(mask: torch.Tensor, a: "OptState", b: "OptState") -> "OptState":
        """Item-wise choice: a where mask is true, else b."""
        field_mask = mask.view(-1, 1, 1)
        return OptState(
            torch.where(field_mask, a.x, b.x),
            torch.where(field_mask, a.z, b.z),
            torch.where(field_mask, a.u, b.u),
            torch.where(mask, a.k, b.k),
        )


@dataclass(frozen=True)
class ParamBlock:
    """Per-iteration denoising strengths and penalties for one block, each (B, m)."""

    sigmas: torch.Tensor
    mus: torch.Tensor

    def __post_init__(self) -> None:
        sigmas = torch.as_tensor(self.sigmas)
        mus = torch.as_tensor(self.mus)
        if sigmas.dim() == 1:
            sigmas = sigmas.unsqueeze(0)
        if mus.dim() == 1:
            mus = mus.unsqueeze(0)
        if sigmas.shape != mus.shape or sigmas.shape[-1] < 1:
            raise ValueError(f"sigmas {tuple(sigmas.shape)} and mus {tuple(mus.shape)} must share a length m >= 1")
        if bool((sigmas <= 0).any()) or bool((mus <= 0).any()):
            raise ValueError("denoising strengths and penalties must be strictly positive")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "mus", mus)

    @property
    def m(self) -> int:
        return self.sigmas.shape[-1]

    @classmethod
    def constant(cls, sigma: float, mu: float, m: int, batch: int = 1, dtype: torch.dtype = torch.float64) -> "ParamBlock":
        return cls(torch.full((batch, m), float(sigma), dtype=dtype), torch.full((batch, m), float(mu), dtype=dtype))


def initialize(obs: Observation, model: MeasurementModel) -> OptState:
    """x0 = z0 = model-specific back-projection, u0 = 0, k = 0."""
    x0 = to_complex(model.initialize(obs))
    k = torch.zeros(x0.shape[0], dtype=torch.long, device=x0.device)
    return OptState(x0, x0.clone(), torch.zeros_like(x0), k)


def denoiser_step(state: OptState, sigma: Scalar, prior: Denoiser) -> torch.Tensor:
    """H_sigma(z_k - u_k)."""
    return prior.denoise_complex(state.z - state.u, sigma)


def data_prox(v: torch.Tensor, obs: Observation, model: MeasurementModel, mu: Scalar) -> torch.Tensor:
    """Data-fidelity prox, closed form or one gradient step depending on the model."""
    return model.data_prox(v, obs, mu)


def admm_iterate(
    state: OptState,
    sigma: Scalar,
    mu: Scalar,
    obs: Observation,
    model: MeasurementModel,
    prior: Denoiser,
) -> OptState:
    x = denoiser_step(state, sigma, prior)
    z = data_prox(x + state.u, obs, model, mu)
    u = state.u + x - z
    return OptState(x, z, u, state.k + 1)


def run_block(
    state: OptState,
    params: ParamBlock,
    obs: Observation,
    model: MeasurementModel,
    prior: Denoiser,
    callback: Optional[Callable[[int, OptState], None]] = None,
) -> OptState:
    """m sequential iterations using (sigmas[:, j], mus[:, j]) at inner step j."""
    for j in range(params.m):
        state = admm_iterate(state, params.sigmas[:, j], params.mus[:, j], obs, model, prior)
        if callback is not None:
            callback(j, state)
    return state
