from __future__ import annotations


class ShapeMismatchError(ValueError):
    """Raised when two fields that must share a grid do not."""


class ConfigError(ValueError):
    """Raised for an experiment configuration that cannot be used."""


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an episode whose every item is already done."""


def check_same_grid(a_shape, b_shape, what: str = "fields") -> None:
    if tuple(a_shape[-2:]) != tuple(b_shape[-2:]):
        raise ShapeMismatchError(f"{what} disagree on grid shape: {tuple(a_shape[-2:])} vs {tuple(b_shape[-2:])}")
