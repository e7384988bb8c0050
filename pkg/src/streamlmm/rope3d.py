"""Parallel 3-D rotary position embedding.

The head dimension is split into temporal / height / width slices.  Each slice
is a standard rotary embedding driven by one coordinate.  Text tokens use
their (scaled) timestamp for all three coordinates; visual tokens use
``(frame_time * time_scale, row, col)``.  Because coordinates are derived from
timestamps alone, a text token and a frame patch with the same timestamp get
the same temporal rotation, with no index offset between the two streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class ConfigError(ValueError):
    pass


class Position3D(NamedTuple):
    t: float
    h: float
    w: float


@dataclass(frozen=True)
class RopeLayout:
    head_dim: int
    d_t: int
    d_h: int
    d_w: int
    theta: float = 10000.0

    def __post_init__(self):
        if self.d_t + self.d_h + self.d_w != self.head_dim:
            raise ConfigError(f"rope slices {self.d_t}+{self.d_h}+{self.d_w} != head_dim {self.head_dim}")
        if any(d <= 0 or d % 2 for d in (self.d_t, self.d_h, self.d_w)):
            raise ConfigError(f"rope slices must be positive and even, got {(self.d_t, self.d_h, self.d_w)}")
        if not self.theta > 1:
            raise ConfigError(f"rope theta must exceed 1, got {self.theta}")

    @classmethod
    def for_head_dim(cls, head_dim: int, theta: float = 10000.0) -> "RopeLayout":
        return cls(head_dim, *split_dims(head_dim), theta=theta)

    def inv_freqs(self) -> np.ndarray:
        """Per-pair frequencies, concatenated t | h | w (length head_dim // 2)."""
        parts = [self.theta ** (-np.arange(0, d, 2, dtype=np.float64) / d) for d in (self.d_t, self.d_h, self.d_w)]
        return np.concatenate(parts)

    def component_of_pair(self) -> np.ndarray:
        """Which coordinate (0=t, 1=h, 2=w) drives each rotary pair."""
        return np.repeat([0, 1, 2], [self.d_t // 2, self.d_h // 2, self.d_w // 2])


def split_dims(head_dim: int) -> tuple[int, int, int]:
    """Split head_dim into three even widths; leftover pairs go to the temporal slice."""
    if head_dim < 6 or head_dim % 2:
        raise ConfigError(f"head_dim must be even and >= 6, got {head_dim}")
    pairs = head_dim // 2
    base = pairs // 3
    d_hw = 2 * base
    return head_dim - 2 * d_hw, d_hw, d_hw


def text_position(timestamp: float, time_scale: float = 1.0) -> Position3D:
    if timestamp < 0:
        raise ValueError(f"negative timestamp {timestamp}")
    if time_scale <= 0:
        raise ValueError(f"time_scale must be positive, got {time_scale}")
    tau = timestamp * time_scale
    return Position3D(tau, tau, tau)


def visual_position(frame_time: float, time_scale: float, row: int, col: int, grid=None) -> Position3D:
    if frame_time < 0:
        raise ValueError(f"negative frame time {frame_time}")
    if row < 0 or col < 0 or (grid is not None and (row >= grid[0] or col >= grid[1])):
        raise ValueError(f"patch ({row}, {col}) outside grid {grid}")
    return Position3D(frame_time * time_scale, float(row), float(col))


def text_positions(times: Sequence[float], time_scale: float = 1.0) -> np.ndarray:
    """Vectorised text_position: (n, 3) array."""
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    if np.any(t < 0):
        raise ValueError("negative timestamp in text stream")
    tau = t * time_scale
    return np.stack([tau, tau, tau], axis=1)


def frame_positions(frame_time: float, grid: tuple[int, int], time_scale: float = 1.0) -> np.ndarray:
    """(rows*cols, 3) positions of one frame's patches in row-major order."""
    rows, cols = grid
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    t = np.full(rows * cols, frame_time * time_scale)
    return np.stack([t, r.reshape(-1), c.reshape(-1)], axis=1).astype(np.float64)


def rope_angles(pos: np.ndarray, layout: RopeLayout) -> np.ndarray:
    """Rotation angle per token and pair: (n, head_dim // 2)."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    return pos[:, layout.component_of_pair()] * layout.inv_freqs()


def apply_rope3d(x: np.ndarray, pos, layout: RopeLayout, inverse: bool = False) -> np.ndarray:
    """Rotate consecutive pairs of the last axis.

    ``x`` is (head_dim,), (n, head_dim) or (n, heads, head_dim); ``pos`` is one
    Position3D or an (n, 3) array.  ``inverse`` applies the transpose rotation
    (used by the backward pass).
    """
    if x.shape[-1] != layout.head_dim:
        raise ValueError(f"vector length {x.shape[-1]} != layout head_dim {layout.head_dim}")
    single = x.ndim == 1
    if single:
        x = x[None]
    ang = rope_angles(pos, layout)
    if inverse:
        ang = -ang
    cos, sin = np.cos(ang), np.sin(ang)
    if x.ndim == 3:
        cos, sin = cos[:, None, :], sin[:, None, :]
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, x.shape), dtype=np.result_type(x, cos))
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    out = out.astype(x.dtype, copy=False)
    return out[0] if single else out


def parallel_positions(text_times, frame_times, grid, time_scale: float = 1.0):
    """Positions for a text stream and a list of frames, each from its own timestamp.

    Returns ``(text_pos (n,3), [frame_pos (rows*cols,3), ...])``.
    """
    return (
        text_positions(text_times, time_scale),
        [frame_positions(t, grid, time_scale) for t in frame_times],
    )


def interleaved_positions(text_times, frame_times, tokens_per_frame: int):
    """Sequential 1-D indices for the conventional interleaved arrangement.

    Frames and text tokens are merged in time order (a frame precedes text at
    the same time) and numbered consecutively.  Returns (text_index, frame_start_index).
    """
    events = [(t, 0, j) for j, t in enumerate(frame_times)] + [(t, 1, i) for i, t in enumerate(text_times)]
    events.sort()
    text_idx = np.zeros(len(text_times))
    frame_idx = np.zeros(len(frame_times))
    cursor = 0
    for _, kind, k in events:
        if kind == 0:
            frame_idx[k] = cursor
            cursor += tokens_per_frame
        else:
            text_idx[k] = cursor
            cursor += 1
    return text_idx, frame_idx
