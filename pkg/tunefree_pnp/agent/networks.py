"""Actor and critic networks over the stacked observation planes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatchError

# keeps raw parameters strictly inside (0, 1)
SQUASH_EPS = 1e-4


def squash(logits: torch.Tensor) -> torch.Tensor:
    return SQUASH_EPS + (1.0 - 2.0 * SQUASH_EPS) * torch.sigmoid(logits)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projected) shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.conv1(x))
        out = self.conv2(out)
        return F.relu(out + self.shortcut(x))


class ResidualTrunk(nn.Module):
    """Residual stages, each halving the resolution after the first, then global average pooling."""

    def __init__(self, in_channels: int, widths: Sequence[int] = (32, 64, 128, 256), blocks_per_stage: int = 1) -> None:
        super().__init__()
        widths = list(widths)
        if not widths:
            raise ValueError("trunk needs at least one stage")
        self.in_channels = in_channels
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        layers = []
        channels = widths[0]
        for i, width in enumerate(widths):
            for j in range(blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(channels, width, stride))
                channels = width
        self.stages = nn.Sequential(*layers)
        self.out_features = channels

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.dim() != 4 or obs.shape[1] != self.in_channels:
            raise ShapeMismatchError(f"expected observations (B, {self.in_channels}, H, W), got {tuple(obs.shape)}")
        features = self.stages(F.relu(self.stem(obs)))
        return features.mean(dim=(-2, -1))


def _head(in_features: int, hidden: int, out_features: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_features, hidden), nn.ReLU(), nn.Linear(hidden, out_features))


@dataclass(frozen=True)
class PolicyOutputs:
    logits: torch.Tensor  # (B, 2) over {continue, terminate}
    raw_params: torch.Tensor  # (B, action_dim) in (0, 1)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def p_terminate(self) -> torch.Tensor:
        return self.probs[:, 1]

    def log_prob(self, a1: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1).gather(1, a1.long().view(-1, 1)).squeeze(1)


class PolicyNetwork(nn.Module):
    """Shared trunk with a termination head (pi1) and a parameter head (pi2)."""

    def __init__(
        self,
        in_channels: int,
        action_dim: int,
        trunk_widths: Sequence[int] = (32, 64, 128, 256),
        blocks_per_stage: int = 1,
        head_hidden: int = 128,
    ) -> None:
        super().__init__()
        self.action_dim = action_dim
        self.trunk = ResidualTrunk(in_channels, trunk_widths, blocks_per_stage)
        self.termination_head = _head(self.trunk.out_features, head_hidden, 2)
        self.param_head = _head(self.trunk.out_features, head_hidden, action_dim)
        self.description: Dict[str, Any] = {
            "in_channels": in_channels,
            "action_dim": action_dim,
            "trunk_widths": list(trunk_widths),
            "blocks_per_stage": blocks_per_stage,
            "head_hidden": head_hidden,
        }

    def forward(self, obs: torch.Tensor) -> PolicyOutputs:
        features = self.trunk(obs)
        return PolicyOutputs(logits=self.termination_head(features), raw_params=squash(self.param_head(features)))

    def pi1_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.trunk.parameters()
        yield from self.termination_head.parameters()

    def pi2_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.trunk.parameters()
        yield from self.param_head.parameters()


class ValueNetwork(nn.Module):
    def __init__(
        self,
        in_channels: int,
        trunk_widths: Sequence[int] = (32, 64, 128, 256),
        blocks_per_stage: int = 1,
        head_hidden: int = 128,
    ) -> None:
        super().__init__()
        self.trunk = ResidualTrunk(in_channels, trunk_widths, blocks_per_stage)
        self.head = _head(self.trunk.out_features, head_hidden, 1)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(obs)).squeeze(-1)


class QNetwork(nn.Module):
    """State-action critic used when pi2 is learned without the environment model."""

    def __init__(
        self,
        in_channels: int,
        action_dim: int,
        trunk_widths: Sequence[int] = (32, 64, 128, 256),
        blocks_per_stage: int = 1,
        head_hidden: int = 128,
    ) -> None:
        super().__init__()
        self.trunk = ResidualTrunk(in_channels, trunk_widths, blocks_per_stage)
        self.head = _head(self.trunk.out_features + action_dim, head_hidden, 1)

    def forward(self, obs: torch.Tensor, raw_params: torch.Tensor) -> torch.Tensor:
        features = torch.cat([self.trunk(obs), raw_params.to(obs.dtype)], dim=-1)
        return self.head(features).squeeze(-1)
