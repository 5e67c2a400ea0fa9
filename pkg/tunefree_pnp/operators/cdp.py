"""Coded-diffraction-pattern phase retrieval: y_i = |F D_i x|, D_i unit-modulus diagonals."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import torch

from ..errors import ShapeMismatchError, check_same_grid
from .base import MeasurementModel, Observation, Scalar, as_batch, to_complex
from .csmri import fft2c, ifft2c

# zero-amplitude guard for the amplitude-loss gradient
AMPLITUDE_EPS = 1e-12


def random_patterns(shape, num_patterns: int = 4, seed: int = 0, dtype: torch.dtype = torch.complex128) -> torch.Tensor:
    """Modulation fields with phases drawn uniformly from the unit circle, (P, H, W)."""
    generator = torch.Generator(device="cpu").manual_seed(int(seed))
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    phase = 2.0 * math.pi * torch.rand((num_patterns,) + tuple(shape), generator=generator, dtype=real_dtype)
    return torch.polar(torch.ones_like(phase), phase).to(dtype)


@dataclass(frozen=True)
class CdpModel(MeasurementModel):
    patterns: torch.Tensor  # (P, H, W) or (B, P, H, W), unit modulus
    alpha: torch.Tensor  # () or (B,)
    noise_peak: float = 255.0

    task = "pr"

    def __post_init__(self) -> None:
        real_dtype = self.patterns.real.dtype
        alpha = torch.as_tensor(self.alpha, dtype=real_dtype, device=self.patterns.device)
        if (alpha < 0).any():
            raise ValueError(f"alpha must be >= 0, got {alpha.tolist()}")
        if not torch.allclose(self.patterns.abs(), torch.ones_like(self.patterns.real), atol=1e-6):
            raise ValueError("CDP patterns must be unit modulus")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def random(cls, shape, alpha: float, num_patterns: int = 4, seed: int = 0, noise_peak: float = 255.0,
               dtype: torch.dtype = torch.complex128) -> "CdpModel":
        patterns = random_patterns(shape, num_patterns, seed, dtype)
        return cls(patterns=patterns, alpha=torch.tensor(float(alpha)), noise_peak=noise_peak)

    @property
    def num_patterns(self) -> int:
        return self.patterns.shape[-3]

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """A_i x for every pattern: (B, H, W) -> (B, P, H, W)."""
        check_same_grid(x.shape, self.patterns.shape, "image and CDP patterns")
        return fft2c(self.patterns * to_complex(x).unsqueeze(-3))

    def apply_adjoint(self, w: torch.Tensor) -> torch.Tensor:
        """sum_i A_i^H w_i: (B, P, H, W) -> (B, H, W)."""
        return (self.patterns.conj() * ifft2c(to_complex(w))).sum(dim=-3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return cdp_forward(x, self)

    def synthesize(self, x: torch.Tensor, seed: int) -> Observation:
        amplitude = cdp_forward(x, self)
        intensity = amplitude**2
        generator = torch.Generator(device="cpu").manual_seed(int(seed))
        noise = torch.randn(intensity.shape, generator=generator, dtype=intensity.dtype).to(intensity.device)
        scale = as_batch(self.alpha / self.noise_peak, intensity, trailing=3)
        noisy = intensity + scale * amplitude * noise
        return Observation(torch.sqrt(torch.clamp(noisy, min=0.0)))

    def data_prox(self, v: torch.Tensor, obs: Observation, mu: Scalar) -> torch.Tensor:
        return data_prox_pr(v, obs, self, mu)

    def initialize(self, obs: Observation) -> torch.Tensor:
        # mean_i |A_i^H y_i| = mean_i |F^H y_i| since |D_i| = 1
        back = self.patterns.conj() * ifft2c(to_complex(obs.y))
        return to_complex(back.abs().mean(dim=-3))

    def noise_level(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, dtype=self.alpha.dtype, device=self.alpha.device)

    @property
    def nominal_noise(self) -> torch.Tensor:
        return torch.zeros_like(self.alpha)

    def expand(self, batch: int) -> "CdpModel":
        patterns = self.patterns if self.patterns.dim() == 4 else self.patterns.unsqueeze(0)
        if patterns.shape[0] == 1 and batch != 1:
            patterns = patterns.expand(batch, -1, -1, -1)
        alpha = self.alpha.expand(batch) if self.alpha.dim() == 0 else self.alpha
        if patterns.shape[0] != batch or alpha.shape[0] != batch:
            raise ShapeMismatchError(f"model batch {patterns.shape[0]} cannot be expanded to {batch}")
        return replace(self, patterns=patterns, alpha=alpha)

    def select(self, index: Sequence[int]) -> "CdpModel":
        return replace(self, patterns=self.patterns[list(index)], alpha=self.alpha[list(index)])

    @classmethod
    def stack(cls, items: Sequence["CdpModel"]) -> "CdpModel":
        items = [m.expand(m.patterns.shape[0] if m.patterns.dim() == 4 else 1) for m in items]
        return cls(
            patterns=torch.cat([m.patterns for m in items]),
            alpha=torch.cat([m.alpha for m in items]),
            noise_peak=items[0].noise_peak,
        )

    def to(self, device: Union[str, torch.device], dtype: torch.dtype) -> "CdpModel":
        complex_dtype = torch.complex128 if dtype == torch.float64 else torch.complex64
        return replace(self, patterns=self.patterns.to(device=device, dtype=complex_dtype),
                       alpha=self.alpha.to(device=device, dtype=dtype))


def cdp_forward(x: torch.Tensor, model: CdpModel) -> torch.Tensor:
    """Noiseless amplitudes |A_i x|, (B, P, H, W)."""
    return model.apply(x).abs()


def amplitude_loss(z: torch.Tensor, obs: Observation, model: CdpModel) -> torch.Tensor:
    """D(z) = sum_i 1/2 || |A_i z| - y_i ||^2 per batch item."""
    residual = model.apply(z).abs() - obs.y
    return 0.5 * (residual**2).sum(dim=(-3, -2, -1))


def amplitude_gradient(z: torch.Tensor, obs: Observation, model: CdpModel) -> torch.Tensor:
    """Wirtinger gradient of D: sum_i A_i^H((|A_i z| - y_i) * A_i z / max(|A_i z|, eps))."""
    az = model.apply(z)
    magnitude = az.abs()
    weight = (magnitude - obs.y) / torch.clamp(magnitude, min=AMPLITUDE_EPS)
    return model.apply_adjoint(weight * az)


def data_prox_pr(v: torch.Tensor, obs: Observation, model: CdpModel, mu: Scalar) -> torch.Tensor:
    """One gradient step of size 1/mu on D from the anchor v."""
    mu_t = torch.as_tensor(mu)
    if (mu_t <= 0).any():
        raise ValueError(f"penalty mu must be > 0, got {mu_t.min().item()}")
    v = to_complex(v)
    return v - amplitude_gradient(v, obs, model) / as_batch(mu, v)
