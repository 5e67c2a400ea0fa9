import math

import pytest
import torch

from tunefree_pnp.errors import ShapeMismatchError
from tunefree_pnp.metrics import PSNR_CAP_DB, psnr


def test_identical_images_hit_the_cap():
    x = torch.rand(2, 16, 16, dtype=torch.float64)
    assert torch.equal(psnr(x, x), torch.full((2,), PSNR_CAP_DB, dtype=torch.float64))


def test_known_mse():
    x_gt = torch.zeros(1, 8, 8, dtype=torch.float64)
    x_hat = torch.full((1, 8, 8), 0.1, dtype=torch.float64)
    assert float(psnr(x_hat, x_gt)) == pytest.approx(20.0, abs=1e-12)


def test_complex_inputs_use_magnitudes():
    x_gt = torch.full((1, 8, 8), 0.5, dtype=torch.float64)
    rotated = (0.5 * torch.exp(1j * torch.full((1, 8, 8), 0.7, dtype=torch.float64))).to(torch.complex128)
    assert float(psnr(rotated, x_gt)) == PSNR_CAP_DB


def test_batched_values_are_independent():
    x_gt = torch.zeros(3, 8, 8, dtype=torch.float64)
    levels = torch.tensor([0.1, 0.01, 0.2], dtype=torch.float64)
    x_hat = levels.view(3, 1, 1).expand(3, 8, 8)
    expected = [-20.0 * math.log10(v) for v in levels.tolist()]
    assert psnr(x_hat, x_gt).tolist() == pytest.approx(expected)


def test_psnr_is_differentiable():
    x_gt = torch.rand(1, 8, 8, dtype=torch.float64)
    x_hat = (x_gt + 0.05).requires_grad_(True)
    psnr(x_hat, x_gt).sum().backward()
    assert x_hat.grad is not None
    assert torch.isfinite(x_hat.grad).all()


def test_grid_mismatch():
    with pytest.raises(ShapeMismatchError):
        psnr(torch.zeros(1, 8, 8), torch.zeros(1, 8, 9))
