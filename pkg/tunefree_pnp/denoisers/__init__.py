from .base import DEFAULT_SIGMA_RANGE, Denoiser, denoise, noise_level_map
from .identity import IdentityDenoiser
from .training import DenoiserTrainingRun, evaluate_denoiser, extract_patches, train_denoiser
from .unet import ResidualUNet, freeze, load_checkpoint_meta, load_denoiser, save_denoiser

__all__ = [
    "DEFAULT_SIGMA_RANGE",
    "Denoiser",
    "DenoiserTrainingRun",
    "IdentityDenoiser",
    "ResidualUNet",
    "denoise",
    "evaluate_denoiser",
    "extract_patches",
    "freeze",
    "load_checkpoint_meta",
    "load_denoiser",
    "noise_level_map",
    "save_denoiser",
    "train_denoiser",
]
