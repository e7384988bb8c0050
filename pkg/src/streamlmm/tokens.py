from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class TimedToken(NamedTuple):
    token: int
    time: float


@dataclass(eq=False)
class FrameTokens:
    """One encoded frame: (rows*cols, model_dim) tokens plus timestamp and grid."""

    tokens: np.ndarray
    time: float
    grid: tuple[int, int]
    positions: np.ndarray  # (rows*cols, 3)
    frame_id: int | None = None
