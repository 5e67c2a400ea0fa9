"""Image ingestion and seeded synthesis of problem instances."""
from __future__ import annotations

import functools
import logging
import zlib
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageOps, UnidentifiedImageError

from .config import ProblemConfig, SamplingPattern, Task
from .operators import CdpModel, CsmriModel, KSpaceMask, MeasurementModel, Observation, Problem, make_problem
from .operators.masks import acceleration_to_rate, load_mask, make_mask

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".pnm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class LoadedImage:
    image_id: str
    pixels: np.ndarray  # (H, W) float64 in [0, 1]

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.pixels.shape)

    def to_tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.from_numpy(self.pixels).to(dtype)


@dataclass
class ImageSet:
    images: List[LoadedImage] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[LoadedImage]:
        return iter(self.images)

    def __getitem__(self, index: int) -> LoadedImage:
        return self.images[index]


def load_image(path: Union[str, Path], size: Optional[int] = None) -> LoadedImage:
    """Grayscale, optionally center-cropped and resized to size x size, scaled to [0, 1]."""
    path = Path(path)
    with Image.open(path) as img:
        gray = img.convert("L")
        if size is not None:
            gray = ImageOps.fit(gray, (size, size), method=Image.Resampling.BICUBIC, centering=(0.5, 0.5))
        pixels = np.asarray(gray, dtype=np.float64) / 255.0
    return LoadedImage(image_id=path.stem, pixels=pixels)


def save_image(pixels: np.ndarray, path: Union[str, Path]) -> Path:
    """Write an (H, W) array in [0, 1] as an 8-bit grayscale image; the suffix picks the format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.rint(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(values).save(path)
    logger.info(f"Saved {values.shape[1]}x{values.shape[0]} image to {path}")
    return path


def ingest_dataset(path: Union[str, Path], size: Optional[int] = None) -> ImageSet:
    """Load every image file of a directory in sorted file-name order."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no image files in {root}")

    dataset = ImageSet()
    for file in files:
        try:
            dataset.images.append(load_image(file, size))
        except (OSError, UnidentifiedImageError, ValueError) as e:
            logger.warning(f"Skipping unreadable image {file}: {e}")
            dataset.skipped += 1
    if not dataset.images:
        raise ValueError(f"none of the {len(files)} files in {root} could be read")
    logger.info(f"Loaded {len(dataset)} images from {root} ({dataset.skipped} skipped)")
    return dataset


@dataclass(frozen=True)
class ProblemSetting:
    """One cell of the evaluation grid: acceleration and noise for CS-MRI, alpha for PR."""

    task: Task
    accel_or_alpha: float
    sigma_n: float = 0.0

    @property
    def key(self) -> str:
        if self.task is Task.CSMRI:
            return f"csmri-x{self.accel_or_alpha:g}-s{self.sigma_n:g}"
        return f"pr-a{self.accel_or_alpha:g}"


def problem_settings(config: ProblemConfig) -> List[ProblemSetting]:
    if config.task is Task.CSMRI:
        return [ProblemSetting(Task.CSMRI, a, s) for a, s in product(config.accelerations, config.sigma_ns)]
    return [ProblemSetting(Task.PR, alpha) for alpha in config.alphas]


def problem_seed(seed: int, image_id: str, setting_key: str) -> int:
    """Seed for one (image, setting) pair, independent of evaluation order."""
    entropy = [int(seed), zlib.crc32(image_id.encode("utf-8")), zlib.crc32(setting_key.encode("utf-8"))]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def mask_filename(acceleration: float) -> str:
    return f"mask_x{acceleration:g}.npz"


@functools.lru_cache(maxsize=64)
def _generated_mask(shape: Tuple[int, int], pattern: SamplingPattern, rate: float, seed: int) -> KSpaceMask:
    return make_mask(shape, pattern, rate, seed)


def mask_for(acceleration: float, shape: Tuple[int, int], config: ProblemConfig) -> KSpaceMask:
    """Mask from mask_dir when a matching file exists there, generated otherwise."""
    if config.mask_dir is not None:
        path = Path(config.mask_dir) / mask_filename(acceleration)
        if path.is_file():
            mask = load_mask(path)
            if mask.shape == tuple(shape):
                return mask
            logger.warning(f"Ignoring {path}: mask grid {mask.shape} does not match image grid {tuple(shape)}")
    return _generated_mask(tuple(shape), config.mask_pattern, acceleration_to_rate(acceleration), config.mask_seed)


def build_model(setting: ProblemSetting, shape: Tuple[int, int], config: ProblemConfig, dtype: torch.dtype = torch.float64) -> MeasurementModel:
    if setting.task is Task.CSMRI:
        return CsmriModel.from_mask(mask_for(setting.accel_or_alpha, shape, config), setting.sigma_n, dtype=dtype)
    complex_dtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    return CdpModel.random(
        shape,
        setting.accel_or_alpha,
        num_patterns=config.num_patterns,
        seed=config.mask_seed,
        noise_peak=config.noise_peak,
        dtype=complex_dtype,
    )


def build_problem(
    image: LoadedImage,
    setting: ProblemSetting,
    config: ProblemConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> Problem:
    model = build_model(setting, image.shape, config, dtype)
    return make_problem(image.to_tensor(dtype), model, problem_seed(seed, image.image_id, setting.key), image.image_id)


def stack_problems(problems: Sequence[Problem]) -> Problem:
    if not problems:
        raise ValueError("cannot stack an empty list of problems")
    return Problem(
        x_gt=torch.cat([p.x_gt for p in problems]),
        model=type(problems[0].model).stack([p.model for p in problems]),
        obs=Observation.stack([p.obs for p in problems]),
        seed=problems[0].seed,
    )


class ProblemSampler:
    """Draws training batches mixing images and grid settings; deterministic per (seed, draw index)."""

    def __init__(self, images: Sequence[LoadedImage], config: ProblemConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> None:
        if not images:
            raise ValueError("empty training dataset")
        shapes = {image.shape for image in images}
        if len(shapes) != 1:
            raise ValueError(f"training images must share one grid, got {sorted(shapes)}")
        self.images = list(images)
        self.config = config
        self.settings = problem_settings(config)
        self.seed = seed
        self.dtype = dtype
        self._draws = 0

    def sample(self, batch_size: int, draw: Optional[int] = None) -> Problem:
        draw = self._draws if draw is None else draw
        self._draws = draw + 1
        rng = np.random.default_rng([self.seed, draw])
        image_index = rng.integers(0, len(self.images), size=batch_size)
        setting_index = rng.integers(0, len(self.settings), size=batch_size)
        seeds = rng.integers(0, 2**31 - 1, size=batch_size)
        problems = [
            build_problem(self.images[i], self.settings[j], self.config, seed=int(s), dtype=self.dtype)
            for i, j, s in zip(image_index, setting_index, seeds)
        ]
        return stack_problems(problems)
