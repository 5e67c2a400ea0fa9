from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from ..models import DenoiserCheckpointMeta
from .base import DEFAULT_SIGMA_RANGE, Denoiser

logger = logging.getLogger(__name__)


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, num_convs: int = 2) -> None:
        layers: List[nn.Module] = []
        for index in range(num_convs):
            layers.append(nn.Conv2d(in_channels if index == 0 else out_channels, out_channels, 3, padding=1))
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class ResidualUNet(Denoiser):
    """U-Net that predicts the noise residual from (noisy plane, noise-level map)."""

    def __init__(
        self,
        widths: Sequence[int] = (32, 64, 128, 256),
        convs_per_scale: int = 2,
        sigma_range: Tuple[float, float] = DEFAULT_SIGMA_RANGE,
    ) -> None:
        super().__init__(sigma_range)
        self.widths = tuple(int(w) for w in widths)
        self.convs_per_scale = int(convs_per_scale)

        self.encoders = nn.ModuleList()
        in_channels = 2
        for width in self.widths:
            self.encoders.append(ConvBlock(in_channels, width, convs_per_scale))
            in_channels = width
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for deep, shallow in zip(self.widths[::-1][:-1], self.widths[::-1][1:]):
            self.upsamplers.append(nn.ConvTranspose2d(deep, shallow, kernel_size=2, stride=2))
            self.decoders.append(ConvBlock(2 * shallow, shallow, convs_per_scale))
        self.head = nn.Conv2d(self.widths[0], 1, kernel_size=1)

    @property
    def architecture(self) -> Dict[str, Any]:
        return {"name": "residual_unet", "widths": list(self.widths), "convs_per_scale": self.convs_per_scale, "in_channels": 2}

    @property
    def architecture_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.architecture, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def predict_residual(self, image: torch.Tensor, sigma_map: torch.Tensor) -> torch.Tensor:
        in_dtype = image.dtype
        param_dtype = self.head.weight.dtype
        x = torch.cat([image, sigma_map], dim=1).to(param_dtype)

        # pad to a multiple of the total downsampling factor
        factor = 2 ** (len(self.widths) - 1)
        height, width = x.shape[-2:]
        pad_h = (-height) % factor
        pad_w = (-width) % factor
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")

        skips = []
        for index, encoder in enumerate(self.encoders):
            if index > 0:
                x = F.max_pool2d(x, 2)
            x = encoder(x)
            skips.append(x)
        for upsample, decoder, skip in zip(self.upsamplers, self.decoders, skips[::-1][1:]):
            x = decoder(torch.cat([upsample(x), skip], dim=1))
        residual = self.head(x)[..., :height, :width]
        return residual.to(in_dtype)


def save_denoiser(
    model: ResidualUNet,
    path: Union[str, Path],
    *,
    epoch: int = 0,
    epoch_losses: Sequence[float] = (),
    training_config: Dict[str, Any] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    scheduler: Any = None,
) -> Path:
    """Write weights (+ optional optimizer state) and a JSON sidecar with metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: Dict[str, Any] = {"state_dict": model.state_dict(), "epoch": epoch}
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if scheduler is not None:
        payload["scheduler"] = scheduler.state_dict()
    torch.save(payload, path)
    meta = DenoiserCheckpointMeta(
        sigma_range=model.trained_sigma_range,
        architecture=model.architecture,
        architecture_hash=model.architecture_hash,
        training_config=training_config or {},
        epoch=epoch,
        epoch_losses=list(epoch_losses),
    )
    path.with_suffix(".json").write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    return path


def load_checkpoint_meta(path: Union[str, Path]) -> DenoiserCheckpointMeta:
    sidecar = Path(path).with_suffix(".json")
    return DenoiserCheckpointMeta.model_validate_json(sidecar.read_text(encoding="utf-8"))


def load_denoiser(path: Union[str, Path], map_location: Union[str, torch.device] = "cpu") -> ResidualUNet:
    """Rebuild a frozen, eval-mode U-Net from a checkpoint and its sidecar."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"denoiser checkpoint not found: {path}")
    meta = load_checkpoint_meta(path)
    model = ResidualUNet(
        widths=meta.architecture["widths"],
        convs_per_scale=meta.architecture["convs_per_scale"],
        sigma_range=tuple(meta.sigma_range),
    )
    if model.architecture_hash != meta.architecture_hash:
        raise ValueError(f"architecture hash mismatch for {path}")
    payload = torch.load(path, map_location=map_location)
    model.load_state_dict(payload["state_dict"])
    logger.info(f"Loaded denoiser {path} (epoch {meta.epoch}, arch {meta.architecture_hash})")
    return freeze(model)


def freeze(model: Denoiser) -> Denoiser:
    model.eval()
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    return model
