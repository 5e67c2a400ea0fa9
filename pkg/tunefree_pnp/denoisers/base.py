from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Tuple, Union

import torch
from torch import nn

from ..errors import ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_RANGE = (1.0 / 255.0, 50.0 / 255.0)


def noise_level_map(sigma: Union[float, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    """Constant per-item noise map shaped like ``like`` (B, 1, H, W)."""
    sigma = torch.as_tensor(sigma, dtype=like.dtype, device=like.device)
    if (sigma < 0).any():
        raise ValueError("noise levels must be nonnegative")
    if sigma.dim() == 0:
        sigma = sigma.expand(like.shape[0])
    return sigma.reshape(-1, 1, 1, 1).expand(like.shape[0], 1, like.shape[-2], like.shape[-1])


class Denoiser(nn.Module, ABC):
    """Gaussian denoiser with a noise-level map input; the handle the solver plugs in.

    Complex images are denoised per plane: real and imaginary parts go through
    the network independently with the same noise level.
    """

    channel_policy = "per-plane"

    def __init__(self, sigma_range: Tuple[float, float] = DEFAULT_SIGMA_RANGE) -> None:
        super().__init__()
        low, high = sigma_range
        if low <= 0 or high < low:
            raise ValueError(f"invalid trained sigma range {sigma_range}")
        self.trained_sigma_range = (float(low), float(high))
        self._clamp_reported = False

    @abstractmethod
    def predict_residual(self, image: torch.Tensor, sigma_map: torch.Tensor) -> torch.Tensor:
        """Noise estimate for real (B, 1, H, W) planes."""
        raise NotImplementedError

    def forward(self, image: torch.Tensor, sigma_map: torch.Tensor) -> torch.Tensor:
        return image - self.predict_residual(image, sigma_map)

    def clamp_sigma(self, sigma: torch.Tensor) -> torch.Tensor:
        low, high = self.trained_sigma_range
        outside = (sigma < low - 1e-12) | (sigma > high + 1e-12)
        if bool(outside.any()):
            level = logging.DEBUG if self._clamp_reported else logging.WARNING
            logger.log(level, f"denoising strength outside trained range [{low:.5f}, {high:.5f}]; clamping")
            self._clamp_reported = True
        return torch.clamp(sigma, low, high)

    def denoise(self, image: torch.Tensor, sigma_map: torch.Tensor) -> torch.Tensor:
        """Denoise real planes (B, 1, H, W) or (B, H, W) with a noise map of the same shape."""
        if image.shape != sigma_map.shape:
            raise ShapeMismatchError(f"image {tuple(image.shape)} and sigma map {tuple(sigma_map.shape)} differ")
        squeeze = image.dim() == 3
        if squeeze:
            image, sigma_map = image.unsqueeze(1), sigma_map.unsqueeze(1)
        out = self(image, self.clamp_sigma(sigma_map))
        return out.squeeze(1) if squeeze else out

    def denoise_complex(self, image: torch.Tensor, sigma: Union[float, torch.Tensor]) -> torch.Tensor:
        """Per-plane denoising of a complex (B, H, W) field at per-item strength sigma."""
        planes = torch.cat([image.real, image.imag], dim=0).unsqueeze(1)
        sigma = torch.as_tensor(sigma, dtype=planes.dtype, device=planes.device).reshape(-1)
        if sigma.numel() == 1:
            sigma = sigma.expand(image.shape[0])
        sigma_map = noise_level_map(torch.cat([sigma, sigma]), planes)
        out = self.denoise(planes, sigma_map).squeeze(1)
        batch = image.shape[0]
        return torch.complex(out[:batch], out[batch:])


def denoise(image: torch.Tensor, sigma_map: torch.Tensor, handle: Denoiser) -> torch.Tensor:
    return handle.denoise(image, sigma_map)
