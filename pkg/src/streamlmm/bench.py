"""Cost of one context refresh: cross-attention vs. concatenated self-attention.

Both architectures get the same encoded frames.  The cross-attention model
runs text through the decoder and attends to visual keys/values; the
baseline prepends all visual tokens to the text and runs every token
through every decoder layer.  FLOPs are counted both in closed form and by
instrumenting every matrix product.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, StreamLMM, concat_forward
from .numkit import count_flops
from .rope3d import frame_positions


def cross_flops(cfg: ModelConfig, text_len: int, n_frames: int) -> int:
    L, N, D, Hf, V = text_len, n_frames * cfg.tokens_per_frame, cfg.model_dim, cfg.ffn_hidden, cfg.vocab
    per_layer = 8 * L * D * D + 4 * L * L * D + 6 * L * D * Hf
    per_cross = 4 * L * D * D + 4 * N * D * D + 4 * L * N * D
    n_vffn = cfg.n_cross - 1 if cfg.use_vffn else 0
    return cfg.layers * per_layer + cfg.n_cross * per_cross + n_vffn * 6 * N * D * Hf + 2 * L * D * V


def concat_flops(cfg: ModelConfig, text_len: int, n_frames: int) -> int:
    n = text_len + n_frames * cfg.tokens_per_frame
    D, Hf, V = cfg.model_dim, cfg.ffn_hidden, cfg.vocab
    per_layer = 8 * n * D * D + 4 * n * n * D + 6 * n * D * Hf
    return cfg.layers * per_layer + 2 * text_len * D * V


@dataclass
class BenchRow:
    arch: str
    frames: int
    flops_formula: int
    flops_counted: int
    wall_median_s: float
    wall_all_s: list


def _inputs(model: StreamLMM, text_len: int, n_frames: int, rng):
    cfg = model.cfg
    ids = rng.integers(0, cfg.vocab, size=text_len)
    t_q = float(n_frames)
    times = t_q + np.arange(text_len) * 0.2
    frames = [model.encode_frame(int(rng.integers(cfg.n_symbols)) if cfg.frame_mode == "symbolic" else None, float(f))
              for f in range(n_frames)] if cfg.frame_mode == "symbolic" else []
    vis0 = np.concatenate([f.tokens for f in frames]) if frames else np.zeros((0, cfg.model_dim), dtype=model.dtype)
    vis_pos = np.concatenate([frame_positions(f.time, cfg.patch_grid, cfg.time_scale) for f in frames]) if frames else np.zeros((0, 3))
    ftimes = np.array([f.time for f in frames])
    return ids, times, frames, vis0, vis_pos, ftimes


def run_bench(model: StreamLMM, frame_counts=(0, 8, 16, 32, 64), text_len: int = 32, repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    if model.cfg.frame_mode != "symbolic":
        raise ValueError("benchmark uses symbolic frames")
    rng = np.random.default_rng(seed)
    rows = []
    for F in frame_counts:
        ids, times, frames, vis0, vis_pos, ftimes = _inputs(model, text_len, F, rng)

        def run_cross():
            return model._run(ids, times, times, vis0, vis_pos, ftimes)[0]

        def run_concat():
            return concat_forward(model, ids, times, frames)

        for arch, fn, formula in (
            ("cross", run_cross, cross_flops(model.cfg, text_len, F)),
            ("concat", run_concat, concat_flops(model.cfg, text_len, F)),
        ):
            with count_flops() as counter:
                fn()
            walls = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                walls.append(time.perf_counter() - t0)
            rows.append(BenchRow(arch, F, formula, counter["flops"], statistics.median(walls), walls))
    return rows


def fit_growth(frames, costs) -> dict:
    """Linear and quadratic least-squares fits of cost against frame count."""
    x = np.asarray(frames, dtype=np.float64)
    y = np.asarray(costs, dtype=np.float64)

    def r2(pred):
        ss_res = float(((y - pred) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    lin = np.polyfit(x, y, 1)
    quad = np.polyfit(x, y, 2)
    slope_loglog = float(np.polyfit(np.log(x[x > 0]), np.log(y[x > 0]), 1)[0]) if np.sum(x > 0) >= 2 else None
    return {
        "linear_coef": lin.tolist(),
        "linear_r2": r2(np.polyval(lin, x)),
        "quadratic_coef": quad.tolist(),
        "quadratic_r2": r2(np.polyval(quad, x)),
        "loglog_exponent": slope_loglog,
    }


def summarize(rows: list[BenchRow]) -> dict:
    out = {}
    for arch in ("cross", "concat"):
        sel = [r for r in rows if r.arch == arch]
        out[arch] = {
            "frames": [r.frames for r in sel],
            "flops": [r.flops_counted for r in sel],
            "wall_median_s": [r.wall_median_s for r in sel],
            "flop_fit": fit_growth([r.frames for r in sel], [r.flops_counted for r in sel]),
            "wall_fit": fit_growth([r.frames for r in sel], [r.wall_median_s for r in sel]),
        }
    return out
