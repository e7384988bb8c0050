"""Streaming decode runtime.

A producer encodes frames and appends them to a bounded FIFO queue.  The
decode loop, at every step, reads the clock, snapshots the frames visible
at that instant, and processes the previously emitted token with cached
text keys/values plus cross-attention over exactly that snapshot.  Tokens
already emitted are never recomputed: each keeps the visual context it was
produced with, the same context the training mask gives it.
"""

from __future__ import annotations

import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import FrameCache, StreamLMM
from .tokens import FrameTokens, TimedToken

SCHEDULE_FORMAT = "streamlmm-schedule"
TRANSCRIPT_FORMAT = "streamlmm-transcript"
FORMAT_VERSION = 1


class OrderingError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class FrameQueue:
    """Bounded FIFO of encoded frames.  Safe for one producer and one consumer thread."""

    def __init__(self, capacity: int = 32):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[FrameTokens] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self._last_time = -np.inf
        self._next_id = 0
        self.evicted = 0

    def push(self, frame: FrameTokens) -> int:
        with self._lock:
            if frame.time < self._last_time:
                raise OrderingError(f"frame at {frame.time}s pushed after frame at {self._last_time}s")
            if frame.frame_id is None:
                frame.frame_id = self._next_id
            self._next_id = max(self._next_id, frame.frame_id) + 1
            if len(self._entries) == self.capacity:
                self.evicted += 1
            self._entries.append(frame)
            self._last_time = frame.time
            return frame.frame_id

    def snapshot(self, now: float) -> list[FrameTokens]:
        with self._lock:
            return [f for f in self._entries if f.time <= now]

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def retained_ids(self) -> set:
        with self._lock:
            return {f.frame_id for f in self._entries}


def push_frame(q: FrameQueue, frame: FrameTokens) -> int:
    return q.push(frame)


def snapshot(q: FrameQueue, now: float) -> list[FrameTokens]:
    return q.snapshot(now)


@dataclass
class Clock:
    """``simulated``: step k is stamped t_q + k / decode_rate.
    ``realtime``: stamps are monotone wall-clock readings offset to t_q."""

    mode: str = "simulated"
    decode_rate: float = 1.0
    t_q: float = 0.0
    now: float = 0.0
    _wall0: float = 0.0

    def __post_init__(self):
        if self.mode not in ("simulated", "realtime"):
            raise ValueError(f"unknown clock mode {self.mode!r}")
        if self.decode_rate <= 0:
            raise ValueError("decode_rate must be positive")

    def start(self, t_q: float):
        self.t_q = self.now = float(t_q)
        self._wall0 = time.monotonic()

    def stamp(self, k: int) -> float:
        if self.mode == "simulated":
            self.now = self.t_q + k / self.decode_rate
        else:
            self.now = max(self.now, self.t_q + time.monotonic() - self._wall0)
        return self.now

    def wait_until(self, t: float):
        if self.mode == "realtime":
            delay = t - (self.t_q + time.monotonic() - self._wall0)
            if delay > 0:
                time.sleep(delay)


@dataclass
class StreamState:
    question: list  # TimedToken, all at t_q
    queue: FrameQueue
    clock: Clock
    fixed_context: bool = False
    emitted: list = field(default_factory=list)
    text_cache: list | None = None
    visual_cache: dict = field(default_factory=dict)  # frame_id -> FrameCache
    attended: list = field(default_factory=list)  # per emitted token: frame times it saw
    attended_ids: list = field(default_factory=list)
    step_logits: list = field(default_factory=list)
    _ctx_key: tuple | None = None
    _ctx: list | None = None
    _fixed_ids: tuple | None = None

    @property
    def t_q(self) -> float:
        return self.question[0].time

    @property
    def processed_tokens(self) -> int:
        return 0 if self.text_cache is None else self.text_cache[0][0].shape[1]


def new_state(question: Sequence[TimedToken], clock: Clock, capacity: int = 32, fixed_context: bool = False):
    if not question:
        raise ValueError("empty question")
    t_q = question[0].time
    if any(t.time != t_q for t in question):
        raise ValueError("all question tokens must carry the question time")
    clock.start(t_q)
    return StreamState(list(question), FrameQueue(capacity), clock, fixed_context)


def _visual_context(state: StreamState, model: StreamLMM, frames: list[FrameTokens]):
    key = tuple(f.frame_id for f in frames)
    if key == state._ctx_key:
        return state._ctx
    entries = []
    for f in frames:
        entry = state.visual_cache.get(f.frame_id)
        if entry is None:
            entry = state.visual_cache[f.frame_id] = model.frame_cache(f)
        entries.append(entry)
    if entries:
        ctx = []
        for c in range(len(model.cross)):
            if len(entries) == 1:
                ctx.append((entries[0].keys[c], entries[0].values[c]))
            else:
                ctx.append(
                    (
                        np.concatenate([e.keys[c] for e in entries], axis=1),
                        np.concatenate([e.values[c] for e in entries], axis=1),
                    )
                )
    else:
        ctx = model.empty_visual_ctx()
    state._ctx_key, state._ctx = key, ctx
    return ctx


def decode_step(state: StreamState, model: StreamLMM, sampler: Callable | None = None) -> TimedToken:
    """Emit one token stamped with the current clock reading."""
    k = len(state.emitted)
    now = state.clock.stamp(k)
    if state.fixed_context:
        if state._fixed_ids is None:
            state._fixed_ids = tuple(f.frame_id for f in state.queue.snapshot(state.t_q))
        frames = [f for f in state.queue.snapshot(state.t_q) if f.frame_id in state._fixed_ids]
    else:
        frames = state.queue.snapshot(now)
    retained = state.queue.retained_ids()
    for fid in [fid for fid in state.visual_cache if fid not in retained]:
        del state.visual_cache[fid]
    ctx = _visual_context(state, model, frames)
    if k == 0:
        new = state.question
    else:
        new = [state.emitted[-1]]
    logits, state.text_cache = model.extend(state.text_cache, [t.token for t in new], [t.time for t in new], ctx)
    row = logits[-1]
    token = int(np.argmax(row)) if sampler is None else int(sampler(row))
    out = TimedToken(token, now)
    state.emitted.append(out)
    state.attended.append([f.time for f in frames])
    state.attended_ids.append([f.frame_id for f in frames])
    state.step_logits.append(row)
    return out


@dataclass
class DecodeResult:
    tokens: list
    attended: list
    step_logits: list
    status: str = "ok"
    error: str | None = None
    state: StreamState | None = None


def decode_streaming(
    schedule: Iterable,
    question: Sequence[TimedToken],
    model: StreamLMM,
    clock: Clock | None = None,
    max_tokens: int = 16,
    eos: int | None = None,
    capacity: int = 32,
    fixed_context: bool = False,
    sampler: Callable | None = None,
) -> DecodeResult:
    """Decode an answer while frames from ``schedule`` (``(raw_frame, time)``
    pairs in time order) stream in.

    Simulated clock: before each step the producer pushes every frame whose
    time has come.  Realtime clock: a producer thread pushes frames as wall
    time reaches them.  A producer failure ends decoding with the partial
    answer and ``status="producer_error"``.
    """
    clock = clock or Clock()
    state = new_state(question, clock, capacity, fixed_context)
    errors: list[str] = []

    def encoded(items):
        for fid, (raw, t) in enumerate(items):
            yield model.encode_frame(raw, t, frame_id=fid)

    source = encoded(schedule)
    stop = threading.Event()

    if clock.mode == "realtime":

        def produce():
            try:
                for frame in source:
                    clock.wait_until(frame.time)
                    if stop.is_set():
                        return
                    state.queue.push(frame)
            except Exception as exc:  # surfaced through the result
                errors.append(repr(exc))

        worker = threading.Thread(target=produce, name="frame-producer", daemon=True)
        worker.start()
        pending = None
    else:
        pending = []

    status = "ok"
    try:
        for k in range(max_tokens):
            if clock.mode == "simulated":
                now = clock.t_q + k / clock.decode_rate
                try:
                    while True:
                        if not pending:
                            pending.append(next(source))
                        if pending[0].time > now:
                            break
                        state.queue.push(pending.pop(0))
                except StopIteration:
                    pass
                except Exception as exc:
                    errors.append(repr(exc))
            if errors:
                status = "producer_error"
                break
            tok = decode_step(state, model, sampler)
            if eos is not None and tok.token == eos:
                break
    finally:
        stop.set()
    return DecodeResult(
        list(state.emitted), list(state.attended), list(state.step_logits), status,
        errors[0] if errors else None, state,
    )


def oracle_query_times(t_q: float, n_question: int, emitted_times: Sequence[float]) -> np.ndarray:
    """Decode time of each processed row: question rows at t_q, emitted token j
    processed when token j+1 is stamped."""
    return np.array([t_q] * n_question + list(emitted_times[1:]), dtype=np.float64)


def decode_offline_oracle(
    schedule: Sequence,
    question: Sequence[TimedToken],
    model: StreamLMM,
    clock: Clock | None = None,
    max_tokens: int = 16,
    eos: int | None = None,
    capacity: int | None = 32,
    fixed_context: bool = False,
) -> DecodeResult:
    """Cache-free reference: every step reruns the full forward over all text
    so far and all frames up to the step's time, using the time-aware mask."""
    clock = clock or Clock()
    if clock.mode != "simulated":
        raise ValueError("the offline oracle needs a simulated clock")
    clock.start(question[0].time)
    t_q = clock.t_q
    schedule = list(schedule)
    raws = [r for r, _ in schedule]
    ftimes = np.array([t for _, t in schedule], dtype=np.float64)
    if np.any(np.diff(ftimes) < 0):
        raise OrderingError("schedule must be sorted by time")
    ids = [t.token for t in question]
    times = [t.time for t in question]
    emitted, attended, logits_out = [], [], []
    for k in range(max_tokens):
        now = clock.stamp(k)
        horizon = t_q if fixed_context else now
        vis = ftimes <= horizon
        f_raw = [r for r, v in zip(raws, vis) if v]
        f_t = ftimes[vis]
        qt = oracle_query_times(t_q, len(question), [t.time for t in emitted] + [now])
        if fixed_context:
            qt = np.full_like(qt, t_q)
        logits, cache = model.forward_item(ids, times, f_raw, f_t, qt, capacity)
        row = logits[-1]
        tok = TimedToken(int(np.argmax(row)), now)
        fmask = cache["frame_mask"][-1]
        attended.append([float(t) for t, a in zip(f_t, fmask) if a])
        emitted.append(tok)
        logits_out.append(row)
        ids.append(tok.token)
        times.append(now)
        if eos is not None and tok.token == eos:
            break
    return DecodeResult(emitted, attended, logits_out)


def freshness_report(answer: Sequence[TimedToken], schedule_times, attended: Sequence[Sequence[float]]) -> dict:
    """Per-token lag = token time - newest attended frame time."""
    st = np.sort(np.asarray(list(schedule_times), dtype=np.float64))
    if st.size == 0 or not answer:
        return {"tokens": len(answer), "mean_lag": None, "max_lag": None, "newest_fraction": None, "lags": []}
    lags, hits = [], 0
    for tok, seen in zip(answer, attended):
        avail = st[st <= tok.time]
        newest = float(avail[-1]) if avail.size else None
        lags.append(tok.time - max(seen) if seen else None)
        if newest is not None and seen and max(seen) == newest:
            hits += 1
    defined = [l for l in lags if l is not None]
    return {
        "tokens": len(answer),
        "mean_lag": float(np.mean(defined)) if defined else None,
        "max_lag": float(np.max(defined)) if defined else None,
        "newest_fraction": hits / len(answer),
        "lags": lags,
    }


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_schedule(path, entries: Sequence[dict]):
    """entries: dicts with ``time`` and either ``symbol`` or ``frame`` (a .npy path)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": SCHEDULE_FORMAT, "version": FORMAT_VERSION}) + "\n")
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def load_schedule(path) -> list:
    """Returns ``[(raw_frame, time)]`` sorted as in the file (must be nondecreasing)."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        try:
            head = json.loads(fh.readline())
        except json.JSONDecodeError:
            raise ScheduleError(f"{path}: line 1: header is not JSON") from None
        if head.get("format") != SCHEDULE_FORMAT or head.get("version") != FORMAT_VERSION:
            raise ScheduleError(f"{path}: line 1: expected {SCHEDULE_FORMAT} v{FORMAT_VERSION}")
        last = -np.inf
        for lineno, text in enumerate(fh, start=2):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
                t = float(rec["time"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ScheduleError(f"{path}: line {lineno}: bad record ({exc!r})") from None
            if t < 0 or t < last:
                raise ScheduleError(f"{path}: line {lineno}: time {t} negative or out of order")
            last = t
            if "symbol" in rec:
                raw = int(rec["symbol"])
            elif "frame" in rec:
                fp = os.path.join(base, rec["frame"])
                if not os.path.exists(fp):
                    raise ScheduleError(f"{path}: line {lineno}: missing frame file {rec['frame']}")
                raw = np.load(fp)
            else:
                raise ScheduleError(f"{path}: line {lineno}: record needs 'symbol' or 'frame'")
            out.append((raw, t))
    return out


def write_transcript(path, result: DecodeResult, detok: Callable[[int], str] | None = None, header: dict | None = None, summary: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": TRANSCRIPT_FORMAT, "version": FORMAT_VERSION, **(header or {})}, sort_keys=True) + "\n")
        for i, (tok, seen) in enumerate(zip(result.tokens, result.attended)):
            rec = {"type": "token", "i": i, "token": tok.token, "time": tok.time, "attended": seen}
            if detok is not None:
                rec["text"] = detok(tok.token)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"type": "summary", "status": result.status, "error": result.error, **(summary or {})}, sort_keys=True) + "\n")
