"""Training and evaluation of the noise-level-conditioned denoiser."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from ..config import DenoiserTrainingConfig
from ..metrics import psnr
from ..models import DenoiserEpochRecord
from .base import Denoiser, noise_level_map
from .unet import ResidualUNet, freeze, load_checkpoint_meta, save_denoiser

logger = logging.getLogger(__name__)


def extract_patches(images: Sequence[torch.Tensor], patch_size: int, stride: int, max_patches: Optional[int] = None) -> torch.Tensor:
    """Overlapping patches from real 2-D images, (N, 1, P, P)."""
    patches = []
    for image in images:
        if image.shape[-1] < patch_size or image.shape[-2] < patch_size:
            continue
        tiles = image.unfold(0, patch_size, stride).unfold(1, patch_size, stride)
        patches.append(tiles.reshape(-1, patch_size, patch_size))
    if not patches:
        raise ValueError(f"no {patch_size}x{patch_size} patches could be extracted from the corpus")
    stacked = torch.cat(patches).unsqueeze(1)
    if max_patches is not None:
        stacked = stacked[:max_patches]
    return stacked


def lr_factor(epoch: int, config: DenoiserTrainingConfig) -> float:
    if epoch >= config.lr_final_epoch:
        return config.lr_final / config.lr
    if epoch >= config.lr_halve_epoch:
        return 0.5
    return 1.0


@dataclass
class DenoiserTrainingRun:
    handle: ResidualUNet
    epoch_losses: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 10007 + epoch)


def train_denoiser(
    patches: torch.Tensor,
    config: DenoiserTrainingConfig,
    output_dir: Union[str, Path],
    *,
    widths: Sequence[int] = (32, 64, 128, 256),
    convs_per_scale: int = 2,
    resume_from: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
) -> DenoiserTrainingRun:
    """Fit a ResidualUNet on clean patches with L1 loss and per-patch noise levels.

    Shuffling and noise draws are seeded per epoch, so resuming from the
    checkpoint of epoch k replays epoch k + 1 exactly.
    """
    if patches.numel() == 0 or patches.shape[0] == 0:
        raise ValueError("empty patch corpus")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    sigma_range = (config.sigma_min / 255.0, config.sigma_max / 255.0)

    torch.manual_seed(config.seed)
    model = ResidualUNet(widths=widths, convs_per_scale=convs_per_scale, sigma_range=sigma_range).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda epoch: lr_factor(epoch, config))

    start_epoch = 0
    run = DenoiserTrainingRun(handle=model)
    if resume_from is not None:
        payload = torch.load(resume_from, map_location=device)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        start_epoch = int(payload["epoch"])
        run.epoch_losses = list(load_checkpoint_meta(resume_from).epoch_losses)
        logger.info(f"Resuming denoiser training from {resume_from} at epoch {start_epoch}")

    patches = patches.to(dtype=torch.float32)
    log_path = output_dir / "denoiser_train_log.jsonl"
    for epoch in range(start_epoch, config.epochs):
        model.train()
        generator = _epoch_generator(config.seed, epoch)
        loader = DataLoader(TensorDataset(patches), batch_size=config.batch_size, shuffle=True, generator=generator)
        total, count = 0.0, 0
        for (clean,) in tqdm(loader, desc=f"denoiser epoch {epoch + 1}/{config.epochs}", leave=False):
            clean = clean.to(device)
            sigma = sigma_range[0] + (sigma_range[1] - sigma_range[0]) * torch.rand(clean.shape[0], generator=generator)
            noise = torch.randn(clean.shape, generator=generator)
            sigma = sigma.to(device)
            noisy = clean + sigma.view(-1, 1, 1, 1) * noise.to(device)
            output = model(noisy, noise_level_map(sigma, noisy))
            loss = F.l1_loss(output, clean)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * clean.shape[0]
            count += clean.shape[0]
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        epoch_loss = total / count
        run.epoch_losses.append(epoch_loss)
        record = DenoiserEpochRecord(epoch=epoch + 1, train_loss=epoch_loss, lr=lr)
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
        checkpoint = save_denoiser(
            model,
            output_dir / f"denoiser_epoch{epoch + 1:03d}.pt",
            epoch=epoch + 1,
            epoch_losses=run.epoch_losses,
            training_config=config.model_dump(mode="json"),
            optimizer=optimizer,
            scheduler=scheduler,
        )
        run.checkpoints.append(checkpoint)
        logger.info(f"Denoiser epoch {epoch + 1}: L1 {epoch_loss:.5f} (lr {lr:.2e})")

    freeze(model)
    return run


@torch.no_grad()
def evaluate_denoiser(handle: Denoiser, images: Sequence[torch.Tensor], sigma: float, seed: int = 0) -> float:
    """Average PSNR after adding Gaussian noise of std sigma (normalized) and denoising."""
    if not images:
        raise ValueError("no test images")
    generator = torch.Generator().manual_seed(seed)
    scores = []
    for image in images:
        clean = image.real if image.is_complex() else image
        clean = clean.reshape(1, 1, *clean.shape[-2:])
        noisy = clean + sigma * torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
        denoised = handle.denoise(noisy, noise_level_map(sigma, noisy))
        scores.append(float(psnr(denoised, clean).item()))
    return sum(scores) / len(scores)
