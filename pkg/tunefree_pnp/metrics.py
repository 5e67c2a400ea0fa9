from __future__ import annotations

import torch

from .errors import ShapeMismatchError

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 10.0 ** (-PSNR_CAP_DB / 10.0)


def psnr(x_hat: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """PSNR in dB of magnitudes against a unit peak, reduced over the last two axes.

    MSE below 1e-10 saturates at 100 dB. Differentiable in ``x_hat``.
    """
    if x_hat.shape[-2:] != x_gt.shape[-2:]:
        raise ShapeMismatchError(f"psnr needs equal grids, got {tuple(x_hat.shape)} and {tuple(x_gt.shape)}")
    diff = x_hat.abs() - x_gt.abs()
    mse = (diff**2).mean(dim=(-2, -1))
    return 10.0 * torch.log10(1.0 / torch.clamp(mse, min=_MSE_FLOOR))
