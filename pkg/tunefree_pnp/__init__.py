"""Tuning-free plug-and-play ADMM: learned schedules for denoising strength, penalty and stopping time."""

__version__ = "1.0.0"
