"""Compressed-sensing MRI: y = F_p x + w with a unitary 2-D FFT and a binary k-space mask."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import torch

from ..errors import ShapeMismatchError, check_same_grid
from .base import MeasurementModel, Observation, Scalar, as_batch, to_complex
from .masks import KSpaceMask


def fft2c(x: torch.Tensor) -> torch.Tensor:
    return torch.fft.fft2(x, norm="ortho")


def ifft2c(k: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(k, norm="ortho")


@dataclass(frozen=True)
class CsmriModel(MeasurementModel):
    mask: torch.Tensor  # (H, W) or (B, H, W), values in {0, 1}, FFT layout
    sigma_n: torch.Tensor  # () or (B,), 8-bit units

    task = "csmri"

    def __post_init__(self) -> None:
        sigma_n = torch.as_tensor(self.sigma_n, dtype=self.mask.dtype, device=self.mask.device)
        if (sigma_n < 0).any():
            raise ValueError(f"sigma_n must be >= 0, got {sigma_n.tolist()}")
        object.__setattr__(self, "sigma_n", sigma_n)

    @classmethod
    def from_mask(cls, mask: KSpaceMask, sigma_n: float, dtype: torch.dtype = torch.float64) -> "CsmriModel":
        return cls(mask=mask.to_tensor(dtype), sigma_n=torch.tensor(float(sigma_n), dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return csmri_forward(x, self)

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        return csmri_adjoint(y, self)

    def synthesize(self, x: torch.Tensor, seed: int) -> Observation:
        x = to_complex(x)
        clean = csmri_forward(x, self)
        generator = torch.Generator(device="cpu").manual_seed(int(seed))
        real_dtype = clean.real.dtype
        # complex Gaussian with E|w|^2 = (sigma_n / 255)^2
        noise = torch.complex(
            torch.randn(clean.shape, generator=generator, dtype=real_dtype),
            torch.randn(clean.shape, generator=generator, dtype=real_dtype),
        ).to(clean.device) / math.sqrt(2.0)
        std = as_batch(self.sigma_n / 255.0, clean)
        return Observation(clean + self.mask * std * noise)

    def data_prox(self, v: torch.Tensor, obs: Observation, mu: Scalar) -> torch.Tensor:
        return data_prox_csmri(v, obs, self, mu)

    def initialize(self, obs: Observation) -> torch.Tensor:
        return csmri_adjoint(obs.y, self)

    def noise_level(self, batch: int) -> torch.Tensor:
        return (self.sigma_n / 255.0).expand(batch) if self.sigma_n.dim() == 0 else self.sigma_n / 255.0

    @property
    def nominal_noise(self) -> torch.Tensor:
        return self.sigma_n

    def expand(self, batch: int) -> "CsmriModel":
        mask = self.mask if self.mask.dim() == 3 else self.mask.unsqueeze(0)
        if mask.shape[0] == 1 and batch != 1:
            mask = mask.expand(batch, -1, -1)
        sigma_n = self.sigma_n.expand(batch) if self.sigma_n.dim() == 0 else self.sigma_n
        if mask.shape[0] != batch or sigma_n.shape[0] != batch:
            raise ShapeMismatchError(f"model batch {mask.shape[0]} cannot be expanded to {batch}")
        return replace(self, mask=mask, sigma_n=sigma_n)

    def select(self, index: Sequence[int]) -> "CsmriModel":
        return replace(self, mask=self.mask[list(index)], sigma_n=self.sigma_n[list(index)])

    @classmethod
    def stack(cls, items: Sequence["CsmriModel"]) -> "CsmriModel":
        items = [m.expand(m.mask.shape[0] if m.mask.dim() == 3 else 1) for m in items]
        return cls(mask=torch.cat([m.mask for m in items]), sigma_n=torch.cat([m.sigma_n for m in items]))

    def to(self, device: Union[str, torch.device], dtype: torch.dtype) -> "CsmriModel":
        return CsmriModel(mask=self.mask.to(device=device, dtype=dtype), sigma_n=self.sigma_n.to(device=device, dtype=dtype))


def csmri_forward(x: torch.Tensor, model: CsmriModel) -> torch.Tensor:
    """mask * F x, F the unitary 2-D DFT."""
    check_same_grid(x.shape, model.mask.shape, "image and k-space mask")
    return model.mask * fft2c(to_complex(x))


def csmri_adjoint(y: torch.Tensor, model: CsmriModel) -> torch.Tensor:
    """F^H (mask * y), the zero-filled reconstruction."""
    check_same_grid(y.shape, model.mask.shape, "k-space data and mask")
    return ifft2c(model.mask * to_complex(y))


def data_prox_csmri(v: torch.Tensor, obs: Observation, model: CsmriModel, mu: Scalar) -> torch.Tensor:
    """argmin_z 1/2 ||y - F_p z||^2 + mu/2 ||z - v||^2, solved per frequency."""
    mu_t = torch.as_tensor(mu)
    if (mu_t <= 0).any():
        raise ValueError(f"penalty mu must be > 0, got {mu_t.min().item()}")
    check_same_grid(v.shape, model.mask.shape, "prox anchor and mask")
    mu_b = as_batch(mu, v)
    numerator = model.mask * obs.y + mu_b * fft2c(to_complex(v))
    return ifft2c(numerator / (model.mask + mu_b))
