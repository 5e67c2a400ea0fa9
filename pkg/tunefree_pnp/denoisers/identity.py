from __future__ import annotations

import torch

from .base import Denoiser


class IdentityDenoiser(Denoiser):
    """Placeholder prior that returns its input; stands in for a trained network in tests."""

    def predict_residual(self, image: torch.Tensor, sigma_map: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(image)

    def forward(self, image: torch.Tensor, sigma_map: torch.Tensor) -> torch.Tensor:
        return image
