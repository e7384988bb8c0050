"""Dense instruction data: timestamping, compilation, synthetic corpora, corpus files.

Corpus files are JSON Lines.  Line 1 is a header::

    {"format": "streamlmm-corpus", "version": 1, "seed": 7, "generator": {...}}

Each following line is one record with a ``"type"`` field:

``video``
    ``video_id``, ``duration``, ``fps``, ``symbols`` (symbol id per frame,
    frame k shown at ``k / fps`` seconds).
``doc``
    ``video_id``, ``duration``, ``segments``: list of ``[t_start, t_end, caption]``.
``triplet``
    ``video_id``, ``t_start``, ``t_end``, ``instruction``, ``answer`` and an
    optional ``probe`` tag (``"now"`` or ``"future"``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .masks import build_causal_mask, build_stream_mask
from .tokens import TimedToken

CORPUS_FORMAT = "streamlmm-corpus"
CORPUS_VERSION = 1

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class CorpusError(ValueError):
    """Malformed corpus record; ``line`` is 1-based."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass
class DenseCaptionDoc:
    video_id: str
    duration: float
    segments: list  # [(t_start, t_end, caption)]

    def validate(self):
        for s, e, cap in self.segments:
            if not 0 <= s < e <= self.duration:
                raise CorpusError(f"segment [{s}, {e}] outside 0 <= start < end <= {self.duration}")
            if not cap:
                raise CorpusError("empty caption")


@dataclass
class InstructionTriplet:
    t_start: float
    t_end: float
    instruction: str
    answer: str
    video_id: str = ""
    probe: str = "now"

    def validate(self):
        if not self.t_start < self.t_end:
            raise CorpusError(f"interval inversion: t_start {self.t_start} >= t_end {self.t_end}")
        if self.t_start < 0:
            raise CorpusError("negative t_start")
        if not self.instruction.strip() or not self.answer.strip():
            raise CorpusError("instruction and answer must be nonempty")


@dataclass
class SymbolVideo:
    video_id: str
    duration: float
    fps: float
    symbols: list

    def frame_times(self) -> list[float]:
        return [k / self.fps for k in range(len(self.symbols))]

    def symbol_at(self, t: float) -> int:
        """Symbol on screen at time t (the newest frame at or before t)."""
        k = int(math.floor(t * self.fps + 1e-9))
        return self.symbols[min(max(k, 0), len(self.symbols) - 1)]


@dataclass
class TimedTokenSequence:
    tokens: list  # TimedToken
    roles: list  # "instruction" | "answer"
    source: InstructionTriplet | None = None

    @property
    def times(self) -> list[float]:
        return [t.time for t in self.tokens]


class Tokenizer:
    """Whitespace tokenizer over a closed vocabulary."""

    def __init__(self, words):
        self.itos = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(t.split())
        return cls(words)

    def __len__(self):
        return len(self.itos)

    @property
    def bos(self):
        return self.stoi["<bos>"]

    @property
    def eos(self):
        return self.stoi["<eos>"]

    def encode(self, text: str) -> list[int]:
        unk = self.stoi["<unk>"]
        return [self.stoi.get(w, unk) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.itos[i] for i in ids)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos) -> "Tokenizer":
        tok = cls([])
        tok.itos = list(itos)
        tok.stoi = {w: i for i, w in enumerate(tok.itos)}
        return tok


def assign_timestamps(triplet: InstructionTriplet, decode_rate: float, tokenizer: Tokenizer) -> TimedTokenSequence:
    """Instruction tokens all at t_start; answer token i at t_start + i / decode_rate."""
    if decode_rate <= 0:
        raise ValueError("decode_rate must be positive")
    t0 = triplet.t_start
    instr = tokenizer.encode(triplet.instruction)
    ans = tokenizer.encode(triplet.answer)
    tokens = [TimedToken(i, t0) for i in instr] + [TimedToken(a, t0 + k / decode_rate) for k, a in enumerate(ans)]
    roles = ["instruction"] * len(instr) + ["answer"] * len(ans)
    return TimedTokenSequence(tokens, roles, triplet)


@dataclass
class TrainingItem:
    inputs: np.ndarray  # token ids
    input_times: np.ndarray  # timestamps of the input tokens (rotary positions)
    query_times: np.ndarray  # decode time of each row = timestamp of the token it predicts
    targets: np.ndarray
    frame_times: np.ndarray
    stream_mask: np.ndarray  # (rows, frames) bool
    causal_mask: np.ndarray
    loss_mask: np.ndarray
    frames: list = field(default_factory=list)


def compile_training_item(seq: TimedTokenSequence, frame_times, frames=None, capacity: int | None = None) -> TrainingItem:
    """Next-token item.  Row i reads token i and predicts token i+1; it is
    computed at the moment token i+1 is emitted, so it sees frames at or
    before ``time(token i+1)``."""
    ft = np.asarray(frame_times, dtype=np.float64).reshape(-1)
    if np.any(np.diff(ft) < 0):
        raise ValueError("frame_times must be sorted")
    toks = seq.tokens
    if "answer" not in seq.roles:
        raise ValueError("degenerate item: empty answer")
    if len(toks) < 2:
        raise ValueError("degenerate item: fewer than two tokens")
    ids = np.array([t.token for t in toks], dtype=np.int64)
    times = np.array([t.time for t in toks], dtype=np.float64)
    qt = times[1:]
    loss_mask = np.array([r == "answer" for r in seq.roles[1:]], dtype=bool)
    return TrainingItem(
        inputs=ids[:-1],
        input_times=times[:-1],
        query_times=qt,
        targets=ids[1:],
        frame_times=ft,
        stream_mask=build_stream_mask(qt, ft, capacity).allowed,
        causal_mask=build_causal_mask(len(ids) - 1),
        loss_mask=loss_mask,
        frames=list(frames) if frames is not None else [],
    )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

INSTRUCTIONS = (
    "what is on screen now ?",
    "describe what you see as it happens .",
    "keep telling me what is shown .",
    "which symbol is visible right now ?",
)
SYMBOL_NAMES = tuple(f"sym{k}" for k in range(64))


@dataclass
class SynthCorpus:
    seed: int
    videos: list
    docs: list
    triplets: list
    future_triplets: list
    params: dict


def synth_generate(
    seed: int,
    n_videos: int,
    duration: float = 16.0,
    fps: float = 1.0,
    n_symbols: int = 8,
    hold: float = 1.0,
    triplets_per_video: int = 5,
    answer_len: int = 6,
    decode_rate: float = 1.0,
    future_delta: float | None = None,
) -> SynthCorpus:
    """Deterministic symbolic-video corpus.

    Each video shows i.i.d. uniform symbols, each held for ``hold`` seconds.
    Answer token i of a triplet names the symbol on screen at the token's own
    timestamp; the future-probe twin names the symbol ``future_delta``
    seconds later (default one hold period, so it is independent of
    everything visible).
    """
    if n_symbols > len(SYMBOL_NAMES):
        raise ValueError(f"at most {len(SYMBOL_NAMES)} symbols")
    delta = hold if future_delta is None else future_delta
    rng = np.random.default_rng(seed)
    answer_span = (answer_len - 1) / decode_rate
    n_frames = int(round(duration * fps))
    videos, docs, triplets, futures = [], [], [], []
    for v in range(n_videos):
        vid = f"v{v:06d}"
        n_segments = int(math.ceil(duration / hold))
        seg_symbols = rng.integers(0, n_symbols, size=n_segments)
        symbols = [int(seg_symbols[min(int(k / fps / hold + 1e-9), n_segments - 1)]) for k in range(n_frames)]
        video = SymbolVideo(vid, duration, fps, symbols)
        videos.append(video)
        segments = []
        for s in range(n_segments):
            t0, t1 = s * hold, min((s + 1) * hold, duration)
            segments.append((t0, t1, f"{SYMBOL_NAMES[seg_symbols[s]]} is shown"))
        docs.append(DenseCaptionDoc(vid, duration, segments))
        latest_start = duration - answer_span - delta - 1.0 / fps
        if latest_start < 0:
            raise ValueError("duration too short for the requested answers")
        for _ in range(triplets_per_video):
            t_start = float(rng.integers(0, int(math.floor(latest_start * fps)) + 1)) / fps
            instr = INSTRUCTIONS[int(rng.integers(len(INSTRUCTIONS)))]
            times = [t_start + i / decode_rate for i in range(answer_len)]
            now = " ".join(SYMBOL_NAMES[video.symbol_at(t)] for t in times)
            fut = " ".join(SYMBOL_NAMES[video.symbol_at(t + delta)] for t in times)
            t_end = t_start + max(answer_span, 1.0 / decode_rate)
            triplets.append(InstructionTriplet(t_start, t_end, instr, now, vid, "now"))
            futures.append(InstructionTriplet(t_start, t_end, instr, fut, vid, "future"))
    params = dict(
        n_videos=n_videos, duration=duration, fps=fps, n_symbols=n_symbols, hold=hold,
        triplets_per_video=triplets_per_video, answer_len=answer_len, decode_rate=decode_rate,
        future_delta=delta,
    )
    corpus = SynthCorpus(seed, videos, docs, triplets, futures, params)
    check_synth_consistency(corpus)
    return corpus


def check_synth_consistency(corpus: SynthCorpus):
    """Every answer word must name the symbol on screen at its (shifted) timestamp."""
    videos = {v.video_id: v for v in corpus.videos}
    rate = corpus.params["decode_rate"]
    delta = corpus.params["future_delta"]
    for tri in corpus.triplets + corpus.future_triplets:
        video = videos[tri.video_id]
        shift = delta if tri.probe == "future" else 0.0
        for i, word in enumerate(tri.answer.split()):
            want = SYMBOL_NAMES[video.symbol_at(tri.t_start + i / rate + shift)]
            if word != want:
                raise AssertionError(f"{tri.video_id} answer word {i}: {word} != {want}")


def synth_tokenizer(n_symbols: int = 8) -> Tokenizer:
    words = set(SYMBOL_NAMES[:n_symbols])
    for s in INSTRUCTIONS:
        words.update(s.split())
    words.update(["is", "shown"])
    return Tokenizer(words)


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def _record(obj) -> dict:
    if isinstance(obj, SymbolVideo):
        return {"type": "video", "video_id": obj.video_id, "duration": obj.duration, "fps": obj.fps, "symbols": obj.symbols}
    if isinstance(obj, DenseCaptionDoc):
        return {"type": "doc", "video_id": obj.video_id, "duration": obj.duration, "segments": [list(s) for s in obj.segments]}
    if isinstance(obj, InstructionTriplet):
        return {
            "type": "triplet", "video_id": obj.video_id, "t_start": obj.t_start, "t_end": obj.t_end,
            "instruction": obj.instruction, "answer": obj.answer, "probe": obj.probe,
        }
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_corpus(path, records, header: dict | None = None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        head = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, **(header or {})}
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(_record(r), sort_keys=True) + "\n")


def _parse(rec: dict, line: int):
    kind = rec.get("type")
    try:
        if kind == "video":
            obj = SymbolVideo(str(rec["video_id"]), float(rec["duration"]), float(rec["fps"]), [int(s) for s in rec["symbols"]])
            if obj.fps <= 0:
                raise CorpusError("fps must be positive", line)
            return obj
        if kind == "doc":
            obj = DenseCaptionDoc(
                str(rec["video_id"]), float(rec["duration"]),
                [(float(s), float(e), str(c)) for s, e, c in rec["segments"]],
            )
        elif kind == "triplet":
            obj = InstructionTriplet(
                float(rec["t_start"]), float(rec["t_end"]), str(rec["instruction"]), str(rec["answer"]),
                str(rec.get("video_id", "")), str(rec.get("probe", "now")),
            )
        else:
            raise CorpusError(f"unknown record type {kind!r}", line)
    except CorpusError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"schema violation in {kind} record: {exc!r}", line) from None
    try:
        obj.validate()
    except CorpusError as exc:
        raise CorpusError(str(exc), line) from None
    return obj


def load_corpus(path, errors: str = "raise") -> Iterator:
    """Stream validated records from a corpus file without loading it whole.

    With ``errors="collect"`` malformed lines are skipped and reported in the
    generator's return value (``StopIteration.value``) as ``[(line, msg)]``.
    """
    bad = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            head = json.loads(first)
        except json.JSONDecodeError:
            raise CorpusError("header is not JSON", 1) from None
        if head.get("format") != CORPUS_FORMAT or head.get("version") != CORPUS_VERSION:
            raise CorpusError(f"expected {CORPUS_FORMAT} v{CORPUS_VERSION} header", 1)
        for lineno, text in enumerate(fh, start=2):
            if not text.strip():
                continue
            try:
                try:
                    rec = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"invalid JSON: {exc.msg}", lineno) from None
                if not isinstance(rec, dict):
                    raise CorpusError("record is not an object", lineno)
                yield _parse(rec, lineno)
            except CorpusError as exc:
                if errors != "collect":
                    raise
                bad.append((exc.line, str(exc)))
    return bad


def read_corpus_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.loads(fh.readline())


def write_synth_corpus(path, corpus: SynthCorpus, future: bool = False):
    tris = corpus.future_triplets if future else corpus.triplets
    header = {"seed": corpus.seed, "generator": corpus.params, "probe": "future" if future else "now"}
    write_corpus(path, [*corpus.videos, *corpus.docs, *tris], header)
