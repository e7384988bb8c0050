"""Toy streaming multimodal decoder.

A pre-norm decoder (RMS norm, SwiGLU FFN, causal self-attention with 3-D
rotary positions) with gated cross-attention blocks inserted after every
``cross_every``-th layer.  Text hidden states are the queries; visual tokens
of the frames visible at each row's query time are keys and values.  Between
consecutive cross blocks the visual tokens are refined by V-FFN experts that
never look at text.  Cross-attention projections may alias the host layer's
self-attention projections (``reuse_params="share"``).

All backward passes are written by hand per block; there is no tape.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .masks import build_causal_mask, build_stream_mask
from .numkit import (
    DimensionError,
    Param,
    bmm,
    cross_entropy,
    gelu,
    gelu_grad,
    gemm,
    load_checkpoint,
    masked_softmax_rows,
    rms_norm,
    rms_norm_backward,
    save_checkpoint,
    softmax_rows_backward,
    swiglu_ffn,
    swiglu_ffn_backward,
)
from .rope3d import ConfigError, RopeLayout, apply_rope3d, frame_positions, split_dims, text_positions
from .tokens import FrameTokens, TimedToken

GATE_KINDS = ("linear", "tanh", "none")
REUSE_MODES = ("share", "copy", "off")
FRAME_MODES = ("symbolic", "pixel")


@dataclass
class ModelConfig:
    layers: int = 8
    model_dim: int = 128
    heads: int = 4
    head_dim: int = 32
    ffn_mult: float = 2.0
    cross_every: int = 2
    gate_kind: str = "linear"
    gate_init: float = 1e-4
    reuse_params: str = "share"
    use_vffn: bool = True
    rope_theta: float = 10000.0
    time_scale: float = 1.0
    vocab: int = 512
    patch_grid: tuple = (4, 4)
    frame_mode: str = "symbolic"
    n_symbols: int = 64
    patch_size: int = 4
    channels: int = 3
    enc_dim: int = 32
    norm_eps: float = 1e-6
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.reuse_params, bool):
            self.reuse_params = "share" if self.reuse_params else "off"
        self.patch_grid = tuple(int(v) for v in self.patch_grid)
        if self.model_dim != self.heads * self.head_dim:
            raise ConfigError(f"model_dim {self.model_dim} != heads {self.heads} * head_dim {self.head_dim}")
        if not 1 <= self.cross_every <= self.layers:
            raise ConfigError(f"cross_every {self.cross_every} outside [1, {self.layers}]")
        if self.gate_kind not in GATE_KINDS:
            raise ConfigError(f"gate_kind must be one of {GATE_KINDS}")
        if self.reuse_params not in REUSE_MODES:
            raise ConfigError(f"reuse_params must be one of {REUSE_MODES}")
        if self.frame_mode not in FRAME_MODES:
            raise ConfigError(f"frame_mode must be one of {FRAME_MODES}")
        if self.gate_init < 0:
            raise ConfigError("gate_init must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        RopeLayout.for_head_dim(self.head_dim, self.rope_theta)

    @property
    def tokens_per_frame(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def ffn_hidden(self) -> int:
        return max(1, int(round(self.ffn_mult * self.model_dim)))

    @property
    def cross_hosts(self) -> list[int]:
        """Decoder layer index after which each cross block runs."""
        return [l for l in range(self.layers) if (l + 1) % self.cross_every == 0]

    @property
    def n_cross(self) -> int:
        return len(self.cross_hosts)

    @property
    def rope(self) -> RopeLayout:
        return RopeLayout.for_head_dim(self.head_dim, self.rope_theta)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_grid"] = list(self.patch_grid)
        rope = self.rope
        d["rope_layout"] = [rope.d_t, rope.d_h, rope.d_w]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        layout = d.pop("rope_layout", None)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if layout is not None and list(layout) != [cfg.rope.d_t, cfg.rope.d_h, cfg.rope.d_w]:
            raise ConfigError(f"rope layout {layout} does not match head_dim {cfg.head_dim} split")
        return cfg


def read_config_file(path) -> ModelConfig:
    """Read a ``[model]`` section of ``key = value`` lines into a ModelConfig."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    if not parser.has_section("model"):
        raise ConfigError(f"{path}: missing [model] section")
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    defaults = ModelConfig.__dataclass_fields__
    out = {}
    for key, raw in parser.items("model"):
        if key not in types:
            raise ConfigError(f"{path}: unknown key {key!r}")
        default = defaults[key].default
        if key == "patch_grid":
            out[key] = tuple(int(v) for v in raw.replace("x", ",").split(","))
        elif key == "reuse_params" and raw.lower() in ("true", "false", "yes", "no", "on"):
            out[key] = "share" if raw.lower() in ("true", "yes", "on") else "off"
        elif isinstance(default, bool):
            out[key] = parser.getboolean("model", key)
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float):
            out[key] = float(raw)
        else:
            out[key] = raw.strip()
    return ModelConfig(**out)


def write_config_file(cfg: ModelConfig, path):
    parser = configparser.ConfigParser()
    d = dataclasses.asdict(cfg)
    d["patch_grid"] = f"{cfg.patch_grid[0]}x{cfg.patch_grid[1]}"
    parser["model"] = {k: str(v) for k, v in d.items()}
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Attention pieces (shared by self- and cross-attention, full and incremental)
# ---------------------------------------------------------------------------


def project_q(x, wq: Param, pos, layout: RopeLayout, heads: int):
    q = gemm(x, wq.value).reshape(len(x), heads, layout.head_dim)
    return apply_rope3d(q, pos, layout).transpose(1, 0, 2)


def project_kv(x, wk: Param, wv: Param, pos, layout: RopeLayout, heads: int):
    n = len(x)
    k = gemm(x, wk.value).reshape(n, heads, layout.head_dim)
    v = gemm(x, wv.value).reshape(n, heads, layout.head_dim)
    return apply_rope3d(k, pos, layout).transpose(1, 0, 2), v.transpose(1, 0, 2)


def attend(qh, kh, vh, allowed, wo: Param):
    """Scaled dot-product attention over heads then output projection.

    qh (H,nq,hd), kh/vh (H,nk,hd), allowed (nq,nk).  Returns (out, cache).
    """
    heads, nq, hd = qh.shape
    s = bmm(qh, kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(hd))
    p = masked_softmax_rows(s, allowed)
    o = bmm(p, vh)
    o2 = o.transpose(1, 0, 2).reshape(nq, heads * hd)
    return gemm(o2, wo.value), (qh, kh, vh, p, o2)


def attend_backward(dout, cache, wo: Param):
    qh, kh, vh, p, o2 = cache
    heads, nq, hd = qh.shape
    wo.grad += gemm(o2.T, dout)
    do = gemm(dout, wo.value.T).reshape(nq, heads, hd).transpose(1, 0, 2)
    dp = bmm(do, vh.transpose(0, 2, 1))
    dvh = bmm(p.transpose(0, 2, 1), do)
    ds = softmax_rows_backward(p, dp) * (1.0 / math.sqrt(hd))
    dqh = bmm(ds, kh)
    dkh = bmm(ds.transpose(0, 2, 1), qh)
    return dqh, dkh, dvh


def project_q_backward(dqh, x, wq: Param, pos, layout):
    dq = apply_rope3d(dqh.transpose(1, 0, 2), pos, layout, inverse=True).reshape(len(x), wq.value.shape[1])
    wq.grad += gemm(x.T, dq)
    return gemm(dq, wq.value.T)


def project_kv_backward(dkh, dvh, x, wk: Param, wv: Param, pos, layout):
    n = len(x)
    width = wk.value.shape[1]
    dk = apply_rope3d(dkh.transpose(1, 0, 2), pos, layout, inverse=True).reshape(n, width)
    dv = dvh.transpose(1, 0, 2).reshape(n, width)
    wk.grad += gemm(x.T, dk)
    wv.grad += gemm(x.T, dv)
    return gemm(dk, wk.value.T) + gemm(dv, wv.value.T)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DecoderLayer:
    attn_norm: Param
    wq: Param
    wk: Param
    wv: Param
    wo: Param
    ffn_norm: Param
    w_gate: Param
    w_up: Param
    w_down: Param


@dataclass(eq=False)
class CrossBlock:
    host: int
    q_norm: Param
    kv_norm: Param
    wq: Param
    wk: Param
    wv: Param
    wo: Param
    gate: Param | None
    # V-FFN expert feeding the next cross block; None for the last block or when disabled
    vffn_norm: Param | None = None
    vffn_gate_w: Param | None = None
    vffn_up: Param | None = None
    vffn_down: Param | None = None
    vffn_gate: Param | None = None

    def shares_projections_with(self, layer: DecoderLayer) -> bool:
        return all(getattr(self, n) is getattr(layer, n) for n in ("wq", "wk", "wv", "wo"))


@dataclass(eq=False)
class FrameCache:
    """Per-frame visual state: V-FFN chain stages and per-block projected keys/values."""

    frame: FrameTokens
    stages: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)


class StreamLMM:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.layout = cfg.rope
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        D, Hf, V = cfg.model_dim, cfg.ffn_hidden, cfg.vocab
        self._named: dict[str, Param] = {}

        def new(name, arr, frozen=False):
            p = Param(name, np.asarray(arr, dtype=self.dtype), frozen=frozen)
            self._named[name] = p
            return p

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        out_std = 1.0 / math.sqrt(D) / math.sqrt(2 * cfg.layers)
        self.embed = new("embed", normal((V, D), 1.0))
        self.layers: list[DecoderLayer] = []
        for l in range(cfg.layers):
            pre = f"layer{l}."
            self.layers.append(
                DecoderLayer(
                    attn_norm=new(pre + "attn_norm", np.ones(D)),
                    wq=new(pre + "wq", normal((D, D), 1 / math.sqrt(D))),
                    wk=new(pre + "wk", normal((D, D), 1 / math.sqrt(D))),
                    wv=new(pre + "wv", normal((D, D), 1 / math.sqrt(D))),
                    wo=new(pre + "wo", normal((D, D), out_std)),
                    ffn_norm=new(pre + "ffn_norm", np.ones(D)),
                    w_gate=new(pre + "w_gate", normal((D, Hf), 1 / math.sqrt(D))),
                    w_up=new(pre + "w_up", normal((D, Hf), 1 / math.sqrt(D))),
                    w_down=new(pre + "w_down", normal((Hf, D), 1 / math.sqrt(Hf) / math.sqrt(2 * cfg.layers))),
                )
            )
        self.cross: list[CrossBlock] = []
        for c, host in enumerate(cfg.cross_hosts):
            pre = f"cross{c}."
            hl = self.layers[host]
            if cfg.reuse_params == "share":
                proj = {n: getattr(hl, n) for n in ("wq", "wk", "wv", "wo")}
            elif cfg.reuse_params == "copy":
                proj = {n: new(pre + n, getattr(hl, n).value.copy()) for n in ("wq", "wk", "wv", "wo")}
            else:
                proj = {
                    n: new(pre + n, normal((D, D), out_std if n == "wo" else 1 / math.sqrt(D)))
                    for n in ("wq", "wk", "wv", "wo")
                }
            block = CrossBlock(
                host=host,
                q_norm=new(pre + "q_norm", np.ones(D)),
                kv_norm=new(pre + "kv_norm", np.ones(D)),
                gate=self._new_gate(new, pre + "gate", D),
                **proj,
            )
            if cfg.use_vffn and c < cfg.n_cross - 1:
                block.vffn_norm = new(pre + "vffn_norm", hl.ffn_norm.value.copy())
                block.vffn_gate_w = new(pre + "vffn_w_gate", hl.w_gate.value.copy())
                block.vffn_up = new(pre + "vffn_w_up", hl.w_up.value.copy())
                block.vffn_down = new(pre + "vffn_w_down", hl.w_down.value.copy())
                block.vffn_gate = self._new_gate(new, pre + "vffn_gate", D)
            self.cross.append(block)
        self.final_norm = new("final_norm", np.ones(D))
        self.head = new("head", normal((D, V), 0.02))
        # frozen toy vision encoder + trainable 2-layer MLP adapter
        if cfg.frame_mode == "symbolic":
            self.enc = new("enc.table", normal((cfg.n_symbols, cfg.enc_dim), 1.0), frozen=True)
        else:
            pdim = cfg.patch_size * cfg.patch_size * cfg.channels
            self.enc = new("enc.proj", normal((pdim, cfg.enc_dim), 1 / math.sqrt(pdim)), frozen=True)
        self.ad_w1 = new("adapter.w1", normal((cfg.enc_dim, D), 1 / math.sqrt(cfg.enc_dim)))
        self.ad_b1 = new("adapter.b1", np.zeros(D))
        self.ad_w2 = new("adapter.w2", normal((D, D), 1 / math.sqrt(D)))
        self.ad_b2 = new("adapter.b2", np.zeros(D))

    def _new_gate(self, new, name, D):
        kind = self.cfg.gate_kind
        if kind == "none":
            return None
        return new(name, np.full(D, self.cfg.gate_init if kind == "linear" else 0.0))

    # -- parameters ---------------------------------------------------------

    def params(self, include_frozen: bool = False) -> list[Param]:
        return [p for p in self._named.values() if include_frozen or not p.frozen]

    def named_params(self) -> dict[str, Param]:
        return dict(self._named)

    def gate_params(self) -> list[Param]:
        out = []
        for b in self.cross:
            out += [g for g in (b.gate, b.vffn_gate) if g is not None]
        return out

    def set_gates(self, value: float):
        for g in self.gate_params():
            g.value[...] = value

    def zero_grad(self):
        for p in self._named.values():
            p.zero_grad()

    def save(self, path, extra: dict | None = None):
        save_checkpoint(
            path,
            {n: p.value for n, p in self._named.items()},
            {"config": self.cfg.to_dict(), **(extra or {})},
        )

    @classmethod
    def load(cls, path) -> "StreamLMM":
        arrays, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["config"]))
        missing = set(model._named) - set(arrays)
        if missing:
            raise ValueError(f"{path}: checkpoint missing parameters {sorted(missing)}")
        for name, p in model._named.items():
            if arrays[name].shape != p.value.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {p.value.shape}")
            p.value[...] = arrays[name]
        return model

    # -- gates --------------------------------------------------------------

    def _gate_scale(self, g: Param | None):
        if g is None:
            return 1.0
        return np.tanh(g.value) if self.cfg.gate_kind == "tanh" else g.value

    def _gate_backward(self, g: Param | None, dy, branch):
        """dy is the gradient wrt the residual sum; returns d(branch)."""
        if g is None:
            return dy
        contrib = (dy * branch).sum(axis=0)
        if self.cfg.gate_kind == "tanh":
            t = np.tanh(g.value)
            g.grad += contrib * (1.0 - t * t)
            return dy * t
        g.grad += contrib
        return dy * g.value

    # -- vision encoder -----------------------------------------------------

    def _frame_features(self, raw_frames: Sequence) -> np.ndarray:
        """Frozen encoder output for a list of raw frames: (F*T, enc_dim)."""
        cfg = self.cfg
        T = cfg.tokens_per_frame
        if not len(raw_frames):
            return np.zeros((0, cfg.enc_dim), dtype=self.dtype)
        if cfg.frame_mode == "symbolic":
            ids = []
            for f in raw_frames:
                if not isinstance(f, (int, np.integer)) or not 0 <= f < cfg.n_symbols:
                    raise ValueError(f"symbolic frame must be an int in [0, {cfg.n_symbols}), got {f!r}")
                ids.append(int(f))
            return np.repeat(self.enc.value[ids], T, axis=0)
        rows, cols = cfg.patch_grid
        ps, ch = cfg.patch_size, cfg.channels
        want = (rows * ps, cols * ps, ch)
        patches = []
        for f in raw_frames:
            f = np.asarray(f, dtype=self.dtype)
            if f.shape != want:
                raise ValueError(f"pixel frame must have shape {want}, got {f.shape}")
            p = f.reshape(rows, ps, cols, ps, ch).transpose(0, 2, 1, 3, 4).reshape(T, ps * ps * ch)
            patches.append(p)
        return gemm(np.concatenate(patches), self.enc.value)

    def _adapter(self, feats):
        z = gemm(feats, self.ad_w1.value) + self.ad_b1.value
        h = gelu(z)
        return gemm(h, self.ad_w2.value) + self.ad_b2.value, (feats, z, h)

    def _adapter_backward(self, dy, cache):
        feats, z, h = cache
        self.ad_w2.grad += gemm(h.T, dy)
        self.ad_b2.grad += dy.sum(axis=0)
        dz = gemm(dy, self.ad_w2.value.T) * gelu_grad(z)
        self.ad_w1.grad += gemm(feats.T, dz)
        self.ad_b1.grad += dz.sum(axis=0)

    def encode_frame(self, frame, t: float, frame_id: int | None = None) -> FrameTokens:
        tokens, _ = self._adapter(self._frame_features([frame]))
        return FrameTokens(
            tokens=tokens,
            time=float(t),
            grid=self.cfg.patch_grid,
            positions=frame_positions(t, self.cfg.patch_grid, self.cfg.time_scale),
            frame_id=frame_id,
        )

    # -- visual stream ------------------------------------------------------

    def _vffn_forward(self, block: CrossBlock, v):
        if block.vffn_norm is None:
            return v, None
        n, inv = rms_norm(v, block.vffn_norm.value, self.cfg.norm_eps)
        f, fc = swiglu_ffn(n, block.vffn_gate_w, block.vffn_up, block.vffn_down)
        return v + self._gate_scale(block.vffn_gate) * f, (v, inv, f, fc)

    def _vffn_backward(self, block: CrossBlock, dv_next, cache):
        if cache is None:
            return dv_next
        v, inv, f, fc = cache
        df = self._gate_backward(block.vffn_gate, dv_next, f)
        dn = swiglu_ffn_backward(df, fc, block.vffn_gate_w, block.vffn_up, block.vffn_down)
        dv, dgamma = rms_norm_backward(dn, v, block.vffn_norm.value, inv)
        block.vffn_norm.grad += dgamma
        return dv_next + dv

    def vffn_update(self, visual_stage, c: int):
        """Stage c -> stage c+1 (identity when the expert is disabled)."""
        return self._vffn_forward(self.cross[c], visual_stage)[0]

    def visual_stages(self, vis0):
        stages, caches = [vis0], []
        for c in range(self.cfg.n_cross - 1):
            nxt, vc = self._vffn_forward(self.cross[c], stages[-1])
            stages.append(nxt)
            caches.append(vc)
        return stages, caches

    def frame_cache(self, frame: FrameTokens) -> FrameCache:
        """Encode-independent per-frame state used by streaming decode."""
        entry = FrameCache(frame=frame)
        entry.stages, _ = self.visual_stages(frame.tokens)
        for block, stage in zip(self.cross, entry.stages):
            vn, _ = rms_norm(stage, block.kv_norm.value, self.cfg.norm_eps)
            k, v = project_kv(vn, block.wk, block.wv, frame.positions, self.layout, self.cfg.heads)
            entry.keys.append(k)
            entry.values.append(v)
        return entry

    # -- decoder blocks -----------------------------------------------------

    def _layer_forward(self, layer: DecoderLayer, x, pos, causal):
        cfg = self.cfg
        a, inv1 = rms_norm(x, layer.attn_norm.value, cfg.norm_eps)
        qh = project_q(a, layer.wq, pos, self.layout, cfg.heads)
        kh, vh = project_kv(a, layer.wk, layer.wv, pos, self.layout, cfg.heads)
        o, ac = attend(qh, kh, vh, causal, layer.wo)
        x1 = x + o
        b, inv2 = rms_norm(x1, layer.ffn_norm.value, cfg.norm_eps)
        f, fc = swiglu_ffn(b, layer.w_gate, layer.w_up, layer.w_down)
        return x1 + f, (x, a, inv1, ac, x1, inv2, fc, pos)

    def _layer_backward(self, layer: DecoderLayer, dx2, cache):
        x, a, inv1, ac, x1, inv2, fc, pos = cache
        db = swiglu_ffn_backward(dx2, fc, layer.w_gate, layer.w_up, layer.w_down)
        dx1_n, dg2 = rms_norm_backward(db, x1, layer.ffn_norm.value, inv2)
        layer.ffn_norm.grad += dg2
        dx1 = dx2 + dx1_n
        dqh, dkh, dvh = attend_backward(dx1, ac, layer.wo)
        da = project_q_backward(dqh, a, layer.wq, pos, self.layout)
        da = da + project_kv_backward(dkh, dvh, a, layer.wk, layer.wv, pos, self.layout)
        dx_n, dg1 = rms_norm_backward(da, x, layer.attn_norm.value, inv1)
        layer.attn_norm.grad += dg1
        return dx1 + dx_n

    def _cross_forward(self, block: CrossBlock, x, text_pos, stage, vis_pos, allowed):
        cfg = self.cfg
        a, inv = rms_norm(x, block.q_norm.value, cfg.norm_eps)
        qh = project_q(a, block.wq, text_pos, self.layout, cfg.heads)
        vn, vinv = rms_norm(stage, block.kv_norm.value, cfg.norm_eps)
        kh, vh = project_kv(vn, block.wk, block.wv, vis_pos, self.layout, cfg.heads)
        o, ac = attend(qh, kh, vh, allowed, block.wo)
        return x + self._gate_scale(block.gate) * o, (x, a, inv, stage, vn, vinv, o, ac, text_pos, vis_pos)

    def _cross_backward(self, block: CrossBlock, dy, cache):
        """Returns (dx, dstage)."""
        x, a, inv, stage, vn, vinv, o, ac, text_pos, vis_pos = cache
        do = self._gate_backward(block.gate, dy, o)
        dqh, dkh, dvh = attend_backward(do, ac, block.wo)
        da = project_q_backward(dqh, a, block.wq, text_pos, self.layout)
        dvn = project_kv_backward(dkh, dvh, vn, block.wk, block.wv, vis_pos, self.layout)
        dx_n, dgq = rms_norm_backward(da, x, block.q_norm.value, inv)
        block.q_norm.grad += dgq
        dstage, dgk = rms_norm_backward(dvn, stage, block.kv_norm.value, vinv)
        block.kv_norm.grad += dgk
        return dy + dx_n, dstage

    def cross_attention(self, text_hidden, visual_stage, vis_pos, allowed, c: int, text_pos):
        """One gated cross-attention block applied to text hidden states."""
        if allowed.shape != (len(text_hidden), len(visual_stage)):
            raise DimensionError(f"mask {allowed.shape} vs ({len(text_hidden)}, {len(visual_stage)})")
        return self._cross_forward(self.cross[c], text_hidden, text_pos, visual_stage, vis_pos, allowed)[0]

    # -- full forward -------------------------------------------------------

    def _run(self, ids, text_times, query_times, vis0, vis_pos, frame_times, capacity=None, with_cross=True):
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        n = len(ids)
        if np.any(ids < 0) or np.any(ids >= cfg.vocab):
            raise ValueError(f"token id outside vocab [0, {cfg.vocab})")
        text_pos = text_positions(text_times, cfg.time_scale)
        qt = np.asarray(query_times, dtype=np.float64).reshape(-1)
        if len(qt) != n or len(text_pos) != n:
            raise DimensionError(f"{n} tokens but {len(text_pos)} times / {len(qt)} query times")
        frame_times = np.asarray(frame_times, dtype=np.float64).reshape(-1)
        T = cfg.tokens_per_frame
        if len(vis0) != len(frame_times) * T:
            raise DimensionError(f"{len(vis0)} visual tokens for {len(frame_times)} frames of {T}")
        fmask = build_stream_mask(qt, frame_times, capacity).allowed
        vmask = np.repeat(fmask, T, axis=1)
        cache = {"ids": ids, "layers": [], "cross": {}, "vmask": vmask, "frame_mask": fmask}
        x = self.embed.value[ids]
        causal = build_causal_mask(n)
        stages, vcaches = self.visual_stages(vis0) if with_cross else ([], [])
        cache["stages"], cache["vffn"] = stages, vcaches
        hosts = {h: c for c, h in enumerate(cfg.cross_hosts)}
        for l, layer in enumerate(self.layers):
            x, lc = self._layer_forward(layer, x, text_pos, causal)
            cache["layers"].append(lc)
            if with_cross and l in hosts:
                c = hosts[l]
                x, cc = self._cross_forward(self.cross[c], x, text_pos, stages[c], vis_pos, vmask)
                cache["cross"][c] = cc
        h, inv = rms_norm(x, self.final_norm.value, cfg.norm_eps)
        cache["final"] = (x, h, inv)
        return gemm(h, self.head.value), cache

    def _backward(self, cache, dlogits):
        """Accumulate parameter gradients; returns gradient wrt visual stage 0."""
        x, h, inv = cache["final"]
        self.head.grad += gemm(h.T, dlogits)
        dh = gemm(dlogits, self.head.value.T)
        dx, dg = rms_norm_backward(dh, x, self.final_norm.value, inv)
        self.final_norm.grad += dg
        stages = cache["stages"]
        dstages = [np.zeros_like(s) for s in stages]
        hosts = {h: c for c, h in enumerate(self.cfg.cross_hosts)}
        for l in reversed(range(len(self.layers))):
            if l in hosts and hosts[l] in cache["cross"]:
                c = hosts[l]
                dx, ds = self._cross_backward(self.cross[c], dx, cache["cross"][c])
                dstages[c] += ds
            dx = self._layer_backward(self.layers[l], dx, cache["layers"][l])
        np.add.at(self.embed.grad, cache["ids"], dx)
        for c in reversed(range(len(cache["vffn"]))):
            dstages[c] += self._vffn_backward(self.cross[c], dstages[c + 1], cache["vffn"][c])
        return dstages[0] if dstages else None

    def forward_item(self, ids, text_times, raw_frames, frame_times, query_times=None, capacity=None):
        """Trainable forward from token ids and raw frames.  Returns (logits, cache)."""
        query_times = text_times if query_times is None else query_times
        feats = self._frame_features(list(raw_frames))
        vis0, acache = self._adapter(feats)
        grid = self.cfg.patch_grid
        vis_pos = np.concatenate(
            [frame_positions(t, grid, self.cfg.time_scale) for t in frame_times] or [np.zeros((0, 3))]
        )
        logits, cache = self._run(ids, text_times, query_times, vis0, vis_pos, frame_times, capacity)
        cache["adapter"] = acache
        return logits, cache

    def backward(self, cache, dlogits):
        dvis0 = self._backward(cache, dlogits)
        if "adapter" in cache and dvis0 is not None and len(dvis0):
            self._adapter_backward(dvis0, cache["adapter"])

    def forward(self, text: Sequence[TimedToken], frames: Sequence[FrameTokens], query_times=None, capacity=None):
        """Logits (len(text), vocab) for timed text tokens over encoded frames.

        A row sees frames with time <= its query time (default: its own timestamp).
        """
        ids = [tok.token for tok in text]
        times = [tok.time for tok in text]
        vis0, vis_pos, ftimes = _stack_frames(frames, self.cfg.model_dim, self.dtype)
        logits, _ = self._run(ids, times, times if query_times is None else query_times, vis0, vis_pos, ftimes, capacity)
        return logits

    def forward_text_only(self, ids, text_times):
        """The underlying language model with every cross block removed."""
        empty = np.zeros((0, self.cfg.model_dim), dtype=self.dtype)
        logits, _ = self._run(ids, text_times, text_times, empty, np.zeros((0, 3)), [], with_cross=False)
        return logits

    def loss(self, logits, targets, loss_mask):
        return cross_entropy(logits, np.asarray(targets, dtype=np.int64), loss_mask)

    # -- incremental decoding -----------------------------------------------

    def extend(self, text_cache, ids, text_times, visual_ctx):
        """Process new text rows on top of cached keys/values.

        ``text_cache`` is a per-layer list of (keys, values) with shapes
        (H, n_old, hd) (or None when empty); it is returned extended, never
        mutated.  ``visual_ctx`` is a per-cross-block list of (keys, values)
        for the frames every new row may see.  Returns (logits, new_cache).
        """
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        m = len(ids)
        pos = text_positions(text_times, cfg.time_scale)
        x = self.embed.value[ids]
        hosts = {h: c for c, h in enumerate(cfg.cross_hosts)}
        new_cache = []
        for l, layer in enumerate(self.layers):
            a, _ = rms_norm(x, layer.attn_norm.value, cfg.norm_eps)
            qh = project_q(a, layer.wq, pos, self.layout, cfg.heads)
            kh, vh = project_kv(a, layer.wk, layer.wv, pos, self.layout, cfg.heads)
            if text_cache is not None:
                kh = np.concatenate([text_cache[l][0], kh], axis=1)
                vh = np.concatenate([text_cache[l][1], vh], axis=1)
            n_old = kh.shape[1] - m
            allowed = np.concatenate([np.ones((m, n_old), dtype=bool), build_causal_mask(m)], axis=1)
            o, _ = attend(qh, kh, vh, allowed, layer.wo)
            new_cache.append((kh, vh))
            x = x + o
            b, _ = rms_norm(x, layer.ffn_norm.value, cfg.norm_eps)
            f, _ = swiglu_ffn(b, layer.w_gate, layer.w_up, layer.w_down)
            x = x + f
            if l in hosts:
                c = hosts[l]
                block = self.cross[c]
                vk, vv = visual_ctx[c]
                a, _ = rms_norm(x, block.q_norm.value, cfg.norm_eps)
                qh = project_q(a, block.wq, pos, self.layout, cfg.heads)
                o, _ = attend(qh, vk, vv, np.ones((m, vk.shape[1]), dtype=bool), block.wo)
                x = x + self._gate_scale(block.gate) * o
        h, _ = rms_norm(x, self.final_norm.value, cfg.norm_eps)
        return gemm(h, self.head.value), new_cache

    def empty_visual_ctx(self):
        z = np.zeros((self.cfg.heads, 0, self.cfg.head_dim), dtype=self.dtype)
        return [(z, z) for _ in self.cross]


def _stack_frames(frames: Sequence[FrameTokens], dim: int, dtype):
    if not frames:
        return np.zeros((0, dim), dtype=dtype), np.zeros((0, 3)), np.zeros(0)
    vis0 = np.concatenate([f.tokens for f in frames]).astype(dtype, copy=False)
    pos = np.concatenate([f.positions for f in frames])
    return vis0, pos, np.array([f.time for f in frames], dtype=np.float64)


def concat_forward(model: StreamLMM, ids, text_times, frames: Sequence[FrameTokens]):
    """Baseline: visual tokens prepended to the text and run through self-attention.

    Used only for cost comparison; every visual token passes through every
    decoder layer and attends to every earlier token.
    """
    cfg = model.cfg
    vis0, vis_pos, _ = _stack_frames(frames, cfg.model_dim, model.dtype)
    x = np.concatenate([vis0, model.embed.value[np.asarray(ids, dtype=np.int64)]])
    pos = np.concatenate([vis_pos, text_positions(text_times, cfg.time_scale)])
    causal = build_causal_mask(len(x))
    for layer in model.layers:
        x, _ = model._layer_forward(layer, x, pos, causal)
    h, _ = rms_norm(x[len(vis0):], model.final_norm.value, cfg.norm_eps)
    return gemm(h, model.head.value)
