import json
import logging

import pytest
import torch

from tunefree_pnp.config import DenoiserTrainingConfig
from tunefree_pnp.denoisers import (
    IdentityDenoiser,
    ResidualUNet,
    evaluate_denoiser,
    extract_patches,
    load_checkpoint_meta,
    load_denoiser,
    noise_level_map,
    save_denoiser,
    train_denoiser,
)
from tunefree_pnp.denoisers.training import lr_factor
from tunefree_pnp.errors import ShapeMismatchError
from tunefree_pnp.metrics import psnr

from conftest import DESK_DIR, smooth_image, tiny_unet


def test_noise_level_map_shape_and_values():
    like = torch.zeros(3, 1, 8, 12)
    sigma_map = noise_level_map(torch.tensor([0.1, 0.2, 0.3]), like)
    assert sigma_map.shape == (3, 1, 8, 12)
    assert sigma_map[1].unique().tolist() == pytest.approx([0.2])
    assert noise_level_map(0.05, like).shape == (3, 1, 8, 12)
    with pytest.raises(ValueError):
        noise_level_map(-0.1, like)


def test_identity_denoiser_returns_its_input():
    image = torch.randn(2, 16, 16, dtype=torch.complex128)
    assert torch.equal(IdentityDenoiser().denoise_complex(image, 0.1), image)


@pytest.mark.parametrize("height, width", [(16, 16), (13, 21), (9, 8)])
def test_unet_keeps_grid(height, width):
    model = tiny_unet(torch.float64)
    image = torch.rand(2, 1, height, width, dtype=torch.float64)
    out = model.denoise(image, noise_level_map(0.1, image))
    assert out.shape == image.shape
    assert out.dtype == torch.float64


def test_complex_fields_denoised_per_plane(unet64):
    real = torch.rand(1, 16, 16, dtype=torch.float64)
    imag = torch.rand(1, 16, 16, dtype=torch.float64)
    out = unet64.denoise_complex(torch.complex(real, imag), 0.1)
    sigma_map = noise_level_map(0.1, real.unsqueeze(1))
    assert torch.allclose(out.real, unet64.denoise(real.unsqueeze(1), sigma_map).squeeze(1))
    assert torch.allclose(out.imag, unet64.denoise(imag.unsqueeze(1), sigma_map).squeeze(1))


def test_output_gradient_in_sigma_matches_finite_differences():
    model = tiny_unet(torch.float64)
    generator = torch.Generator().manual_seed(0)
    image = torch.rand(1, 1, 16, 16, generator=generator, dtype=torch.float64)
    weights = torch.randn(1, 1, 16, 16, generator=generator, dtype=torch.float64)

    def response(sigma: torch.Tensor) -> torch.Tensor:
        return (model.denoise(image, noise_level_map(sigma, image)) * weights).sum()

    sigma = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
    (analytic,) = torch.autograd.grad(response(sigma), sigma)
    step = 1e-6
    with torch.no_grad():
        upper = response(torch.tensor(0.1 + step, dtype=torch.float64))
        lower = response(torch.tensor(0.1 - step, dtype=torch.float64))
    numeric = float(upper - lower) / (2 * step)
    assert abs(float(analytic) - numeric) <= 1e-3 * max(abs(numeric), 1e-6)


def test_denoise_rejects_mismatched_map(unet64):
    with pytest.raises(ShapeMismatchError):
        unet64.denoise(torch.zeros(1, 1, 8, 8, dtype=torch.float64), torch.zeros(1, 1, 8, 9, dtype=torch.float64))


def test_out_of_range_sigma_is_clamped_and_reported_once(caplog):
    model = tiny_unet(torch.float64)
    image = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    caplog.set_level(logging.DEBUG, logger="tunefree_pnp.denoisers.base")
    high = model.denoise(image, noise_level_map(0.9, image))
    top = model.denoise(image, noise_level_map(50.0 / 255.0, image))
    model.denoise(image, noise_level_map(0.9, image))
    assert torch.allclose(high, top)
    levels = [r.levelno for r in caplog.records if "clamping" in r.getMessage()]
    assert levels == [logging.WARNING, logging.DEBUG]


def test_checkpoint_round_trip(tmp_path):
    model = tiny_unet(torch.float32, seed=3)
    path = save_denoiser(model, tmp_path / "unet.pt", epoch=4, epoch_losses=[0.3, 0.2])
    sidecar = json.loads(path.with_suffix(".json").read_text())
    assert sidecar["architecture"]["widths"] == [4, 8]
    assert load_checkpoint_meta(path).epoch == 4

    loaded = load_denoiser(path)
    image = torch.rand(1, 1, 16, 16)
    sigma_map = noise_level_map(0.1, image)
    assert torch.allclose(loaded.denoise(image, sigma_map), model.denoise(image, sigma_map))
    assert not any(p.requires_grad for p in loaded.parameters())
    assert not loaded.training


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_denoiser(tmp_path / "absent.pt")


def test_extract_patches():
    images = [torch.rand(32, 32), torch.rand(8, 8)]
    patches = extract_patches(images, patch_size=16, stride=8)
    assert patches.shape == (9, 1, 16, 16)
    assert torch.equal(patches[0, 0], images[0][:16, :16])
    assert extract_patches(images, 16, 8, max_patches=4).shape[0] == 4
    with pytest.raises(ValueError):
        extract_patches([torch.rand(8, 8)], 16, 8)


def test_learning_rate_schedule():
    config = DenoiserTrainingConfig()
    assert lr_factor(0, config) == 1.0
    assert lr_factor(29, config) == 1.0
    assert lr_factor(30, config) == 0.5
    assert lr_factor(45, config) == pytest.approx(0.1)


def _smooth_patches(count: int = 24) -> torch.Tensor:
    return torch.stack([torch.from_numpy(smooth_image(16, seed=i)).float() for i in range(count)]).unsqueeze(1)


def test_training_writes_checkpoints_and_log(tmp_path):
    config = DenoiserTrainingConfig(epochs=2, batch_size=8, lr=1e-3)
    run = train_denoiser(_smooth_patches(), config, tmp_path, widths=(4, 8), convs_per_scale=1)
    assert len(run.epoch_losses) == 2
    assert [p.name for p in run.checkpoints] == ["denoiser_epoch001.pt", "denoiser_epoch002.pt"]
    lines = (tmp_path / "denoiser_train_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [1, 2]
    assert not any(p.requires_grad for p in run.handle.parameters())


def test_resume_replays_the_next_epoch(tmp_path):
    patches = _smooth_patches()
    straight = train_denoiser(patches, DenoiserTrainingConfig(epochs=2, batch_size=8, lr=1e-3), tmp_path / "a", widths=(4, 8), convs_per_scale=1)
    train_denoiser(patches, DenoiserTrainingConfig(epochs=1, batch_size=8, lr=1e-3), tmp_path / "b", widths=(4, 8), convs_per_scale=1)
    resumed = train_denoiser(
        patches,
        DenoiserTrainingConfig(epochs=2, batch_size=8, lr=1e-3),
        tmp_path / "b",
        widths=(4, 8),
        convs_per_scale=1,
        resume_from=tmp_path / "b" / "denoiser_epoch001.pt",
    )
    assert resumed.epoch_losses == pytest.approx(straight.epoch_losses, rel=1e-5)


def test_empty_corpus_rejected(tmp_path):
    with pytest.raises(ValueError):
        train_denoiser(torch.zeros(0, 1, 16, 16), DenoiserTrainingConfig(epochs=1), tmp_path)


@pytest.mark.slow
def test_smoke_training_beats_the_noisy_input(tmp_path):
    from tunefree_pnp.datasets import ingest_dataset

    corpus = [image.to_tensor(torch.float32) for image in ingest_dataset(DESK_DIR, 64)]
    corpus += [torch.from_numpy(smooth_image(64, seed=s)).float() for s in range(8)]
    patches = extract_patches(corpus, patch_size=32, stride=8)[:200]
    config = DenoiserTrainingConfig(epochs=2, batch_size=8, lr=1e-3, patch_size=32)
    run = train_denoiser(patches, config, tmp_path, widths=(16, 32, 64), convs_per_scale=2)
    assert run.epoch_losses[1] < run.epoch_losses[0]

    held_out = [torch.from_numpy(smooth_image(32, seed=100 + s)).float() for s in range(4)]
    sigma = 25.0 / 255.0
    generator = torch.Generator().manual_seed(0)
    noisy_scores = []
    for image in held_out:
        clean = image.reshape(1, 1, 32, 32)
        noisy = clean + sigma * torch.randn(clean.shape, generator=generator)
        noisy_scores.append(float(psnr(noisy, clean)))
    denoised = evaluate_denoiser(run.handle, held_out, sigma, seed=0)
    assert denoised >= sum(noisy_scores) / len(noisy_scores) + 1.0
