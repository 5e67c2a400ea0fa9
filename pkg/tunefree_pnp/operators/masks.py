"""k-space sampling masks.

Masks are stored in FFT layout (DC at index [0, 0]) so they multiply the output
of ``torch.fft.fft2`` directly. Generation happens in centered coordinates and
is shifted at the end.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
from skimage.draw import line as draw_line

from ..config import SamplingPattern

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KSpaceMask:
    mask: np.ndarray
    target_rate: float
    pattern: SamplingPattern
    seed: int

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.mask.shape)

    @property
    def sampling_rate(self) -> float:
        return float(self.mask.mean())

    def to_tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.from_numpy(self.mask.astype(np.float64)).to(dtype)


def acceleration_to_rate(factor: float) -> float:
    if factor < 1:
        raise ValueError(f"acceleration factor must be >= 1, got {factor}")
    return 1.0 / factor


def _radial_lines(shape: Tuple[int, int], num_lines: int, offset: float) -> np.ndarray:
    h, w = shape
    cy, cx = h // 2, w // 2
    out = np.zeros(shape, dtype=bool)
    out[cy, cx] = True
    for j in range(num_lines):
        theta = offset + j * math.pi / num_lines
        dy, dx = math.sin(theta), math.cos(theta)
        # distance along the direction to the grid border, both ways
        reach = []
        for sign in (1.0, -1.0):
            limits = []
            if abs(dy) > 1e-12:
                limits.append(((h - 1 - cy) if sign * dy > 0 else cy) / abs(dy))
            if abs(dx) > 1e-12:
                limits.append(((w - 1 - cx) if sign * dx > 0 else cx) / abs(dx))
            reach.append(min(limits))
        r0 = int(round(cy - reach[1] * dy))
        c0 = int(round(cx - reach[1] * dx))
        r1 = int(round(cy + reach[0] * dy))
        c1 = int(round(cx + reach[0] * dx))
        rr, cc = draw_line(r0, c0, r1, c1)
        keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[rr[keep], cc[keep]] = True
    return out


def _radial_mask(shape: Tuple[int, int], target_rate: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    unit = rng.uniform(0.0, 1.0)
    size = shape[0] * shape[1]

    def build(n: int) -> np.ndarray:
        return _radial_lines(shape, n, unit * math.pi / n)

    lo, hi = 1, 4 * max(shape)
    # smallest line count reaching the target; rate is close to monotone in n
    while lo < hi:
        mid = (lo + hi) // 2
        if build(mid).sum() / size >= target_rate:
            hi = mid
        else:
            lo = mid + 1
    candidates = [n for n in (lo - 1, lo, lo + 1) if n >= 1]
    best = min((build(n) for n in candidates), key=lambda m: abs(m.sum() / size - target_rate))
    return best


def _uniform_random_mask(shape: Tuple[int, int], target_rate: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h, w = shape
    count = max(1, int(round(target_rate * h * w)))
    dc = (h // 2) * w + (w // 2)
    others = np.delete(np.arange(h * w), dc)
    chosen = rng.choice(others, size=count - 1, replace=False)
    flat = np.zeros(h * w, dtype=bool)
    flat[dc] = True
    flat[chosen] = True
    return flat.reshape(shape)


def make_mask(
    shape: Tuple[int, int],
    pattern: Union[SamplingPattern, str],
    target_rate: float,
    seed: int = 0,
) -> KSpaceMask:
    """Build a binary k-space mask that always samples DC.

    Radial masks are unions of straight lines through DC at equally spaced
    angles (the seed rotates the whole star); the line count is binary
    searched to get closest to ``target_rate``.
    """
    if not 0.0 < target_rate <= 1.0:
        raise ValueError(f"target_rate must lie in (0, 1], got {target_rate}")
    pattern = SamplingPattern(pattern)
    shape = (int(shape[0]), int(shape[1]))
    if target_rate == 1.0:
        centered = np.ones(shape, dtype=bool)
    elif pattern is SamplingPattern.RADIAL:
        centered = _radial_mask(shape, target_rate, seed)
    else:
        centered = _uniform_random_mask(shape, target_rate, seed)
    mask = np.fft.ifftshift(centered).astype(np.float64)
    logger.debug(f"{pattern.value} mask {shape}: target {target_rate:.4f}, measured {mask.mean():.4f}")
    return KSpaceMask(mask=mask, target_rate=float(target_rate), pattern=pattern, seed=int(seed))


def save_mask(mask: KSpaceMask, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, mask=mask.mask, pattern=mask.pattern.value, target_rate=mask.target_rate, seed=mask.seed)
    return path


def load_mask(path: Union[str, Path]) -> KSpaceMask:
    with np.load(Path(path)) as data:
        return KSpaceMask(
            mask=data["mask"].astype(np.float64),
            target_rate=float(data["target_rate"]),
            pattern=SamplingPattern(str(data["pattern"])),
            seed=int(data["seed"]),
        )
