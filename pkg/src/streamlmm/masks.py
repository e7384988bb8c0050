"""Time-aware attention masks.

A text row at time ``t`` may see a frame column at time ``f`` iff ``f <= t``.
Text-to-text attention is plain causal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class StreamMask:
    allowed: np.ndarray  # (text_count, visual_count) bool

    @property
    def text_count(self) -> int:
        return self.allowed.shape[0]

    @property
    def visual_count(self) -> int:
        return self.allowed.shape[1]


@dataclass
class IntegrityReport:
    passed: bool
    comparisons: int
    violations: list = field(default_factory=list)  # (row, col, text_time, frame_time)


def build_stream_mask(text_times, frame_times, capacity: int | None = None) -> StreamMask:
    """``allowed[i, j] = frame_times[j] <= text_times[i]``.

    With ``capacity`` set, a row additionally sees only the newest ``capacity``
    frames among those visible, which is what a FIFO queue of that size holds
    at that moment (frames must be sorted by time for this to be meaningful).
    """
    tt = np.asarray(text_times, dtype=np.float64).reshape(-1)
    ft = np.asarray(frame_times, dtype=np.float64).reshape(-1)
    if np.any(tt < 0) or np.any(ft < 0):
        raise ValueError("mask times must be nonnegative")
    allowed = ft[None, :] <= tt[:, None]
    if capacity is not None and ft.size:
        # rank of each visible frame counted from the newest visible one
        newer = np.cumsum(allowed[:, ::-1], axis=1)[:, ::-1]
        allowed &= newer <= capacity
    return StreamMask(allowed)


def build_causal_mask(n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("negative mask size")
    return np.tril(np.ones((n, n), dtype=bool))


def verify_temporal_integrity(mask: StreamMask, text_times, frame_times) -> IntegrityReport:
    tt = np.asarray(text_times, dtype=np.float64).reshape(-1)
    ft = np.asarray(frame_times, dtype=np.float64).reshape(-1)
    allowed = mask.allowed if isinstance(mask, StreamMask) else np.asarray(mask, dtype=bool)
    if allowed.shape != (tt.size, ft.size):
        raise ValueError(f"mask shape {allowed.shape} vs times ({tt.size}, {ft.size})")
    bad = np.argwhere(allowed & (ft[None, :] > tt[:, None]))
    violations = [(int(i), int(j), float(tt[i]), float(ft[j])) for i, j in bad]
    return IntegrityReport(not violations, int(allowed.size), violations)
