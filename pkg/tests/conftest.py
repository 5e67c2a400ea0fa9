"""Shared fixtures: desk images, tiny problems and small float64 denoisers."""
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from tunefree_pnp.config import SamplingPattern
from tunefree_pnp.datasets import LoadedImage, ingest_dataset, stack_problems
from tunefree_pnp.denoisers import IdentityDenoiser, ResidualUNet, freeze
from tunefree_pnp.operators import CdpModel, CsmriModel, make_mask, make_problem

REPO_ROOT = Path(__file__).resolve().parents[1]
DESK_DIR = REPO_ROOT / "data" / "desk"


def smooth_image(size: int, seed: int, blur: float = 2.0) -> np.ndarray:
    """Blurred random field rescaled to [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    field = gaussian_filter(rng.standard_normal((size, size)), blur)
    field = (field - field.min()) / (field.max() - field.min())
    return 0.05 + 0.9 * field


def tiny_unet(dtype: torch.dtype = torch.float64, seed: int = 0) -> ResidualUNet:
    torch.manual_seed(seed)
    return freeze(ResidualUNet(widths=(4, 8), convs_per_scale=1).to(dtype))


@pytest.fixture
def desk_dir() -> Path:
    return DESK_DIR


@pytest.fixture
def desk_images():
    return ingest_dataset(DESK_DIR, 16).images


@pytest.fixture
def synthetic_images():
    return [LoadedImage(image_id=f"synthetic{i}", pixels=smooth_image(16, seed=i)) for i in range(4)]


@pytest.fixture
def identity_prior():
    return IdentityDenoiser()


@pytest.fixture
def unet64():
    return tiny_unet(torch.float64)


@pytest.fixture
def unet32():
    return tiny_unet(torch.float32)


@pytest.fixture
def csmri_problem():
    x = torch.from_numpy(smooth_image(32, seed=1))
    mask = make_mask((32, 32), SamplingPattern.RADIAL, 0.25, seed=0)
    return make_problem(x, CsmriModel.from_mask(mask, 15.0), seed=3, image_id="smooth")


@pytest.fixture
def cdp_problem():
    x = torch.from_numpy(smooth_image(16, seed=2))
    return make_problem(x, CdpModel.random((16, 16), alpha=9.0, seed=0), seed=4, image_id="smooth")


def csmri_batch(size: int = 16, batch: int = 4, sigma_n: float = 10.0, dtype: torch.dtype = torch.float64):
    """Stacked CS-MRI problems on smooth images sharing one radial mask."""
    model = CsmriModel.from_mask(make_mask((size, size), SamplingPattern.RADIAL, 0.3, seed=0), sigma_n, dtype=dtype)
    problems = [make_problem(torch.from_numpy(smooth_image(size, seed=i)).to(dtype), model, seed=i) for i in range(batch)]
    return stack_problems(problems)
