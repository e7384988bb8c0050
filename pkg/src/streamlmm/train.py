"""Toy training loop: Adam over minibatches of compiled items."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .densedata import SynthCorpus, Tokenizer, TrainingItem, assign_timestamps, compile_training_item
from .model import StreamLMM

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 30
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip: float = 1.0
    seed: int = 0
    decode_rate: float = 1.0
    max_frames: int = 32


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.98, eps=1e-8):
        self.params = list({id(p): p for p in params}.values())
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


def items_from_corpus(corpus: SynthCorpus, tokenizer: Tokenizer, future: bool = False, decode_rate: float = 1.0, max_frames: int = 32) -> list[TrainingItem]:
    videos = {v.video_id: v for v in corpus.videos}
    out = []
    for tri in corpus.future_triplets if future else corpus.triplets:
        video = videos[tri.video_id]
        seq = assign_timestamps(tri, decode_rate, tokenizer)
        horizon = max(seq.times)
        ft = [t for t in video.frame_times() if t <= horizon]
        syms = video.symbols[: len(ft)]
        ft, syms = ft[-max_frames:], syms[-max_frames:]
        out.append(compile_training_item(seq, ft, syms, capacity=max_frames))
    return out


def item_loss(model: StreamLMM, item: TrainingItem, backward: bool = True):
    logits, cache = model.forward_item(
        item.inputs, item.input_times, item.frames, item.frame_times, item.query_times, capacity=None
    )
    loss, dlogits = model.loss(logits, item.targets, item.loss_mask)
    if backward:
        model.backward(cache, dlogits)
    return loss, logits


def train(model: StreamLMM, items: list[TrainingItem], cfg: TrainConfig, callback=None) -> list[float]:
    """Returns the per-step mean loss.  Raises DivergenceError on a non-finite loss."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    order = rng.permutation(len(items))
    cursor = 0
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        model.zero_grad()
        total = 0.0
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(items)), 0
            loss, _ = item_loss(model, items[order[cursor]])
            cursor += 1
            total += loss
        mean = total / cfg.batch_size
        if not math.isfinite(mean):
            raise DivergenceError(f"non-finite loss at step {step}")
        for p in opt.params:
            p.grad /= cfg.batch_size
        if cfg.clip:
            norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in opt.params))
            if norm > cfg.clip:
                for p in opt.params:
                    p.grad *= cfg.clip / norm
        warm = min(1.0, (step + 1) / max(1, cfg.warmup))
        decay = 0.5 * (1 + math.cos(math.pi * step / max(1, cfg.steps)))
        opt.step(cfg.lr * warm * (0.1 + 0.9 * decay))
        history.append(mean)
        if callback is not None:
            callback(step, mean)
        if step % 50 == 0:
            log.info("step %d loss %.4f (%.1fs)", step, mean, time.perf_counter() - t0)
    return history


def answer_accuracy(model: StreamLMM, items: list[TrainingItem]) -> float:
    """Fraction of answer positions whose argmax equals the target."""
    hit = total = 0
    for item in items:
        logits, _ = model.forward_item(item.inputs, item.input_times, item.frames, item.frame_times, item.query_times)
        rows = np.nonzero(item.loss_mask)[0]
        hit += int((logits[rows].argmax(axis=1) == item.targets[rows]).sum())
        total += len(rows)
    return hit / max(total, 1)
