from __future__ import annotations

import logging
from collections import deque
from typing import Deque, Optional

import numpy as np

from ..env import EnvState

logger = logging.getLogger(__name__)


class StateBuffer:
    """Bounded FIFO of single-item states visited while collecting episodes."""

    def __init__(self, capacity: int, seed: Optional[int] = None) -> None:
        if capacity < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._states: Deque[EnvState] = deque(maxlen=capacity)
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._states)

    def push(self, state: EnvState) -> int:
        """Store every not-yet-done item of a batched state; returns how many were added."""
        added = 0
        for item in state.detach().split():
            if bool(item.done[0]):
                continue
            self._states.append(item)
            added += 1
        return added

    def sample(self, batch_size: int) -> EnvState:
        """Uniform draw with replacement, stacked into one batched state."""
        if not self._states:
            raise ValueError("cannot sample from an empty state buffer")
        index = self._rng.integers(0, len(self._states), size=batch_size)
        return EnvState.stack([self._states[i] for i in index])

    def clear(self) -> None:
        self._states.clear()
