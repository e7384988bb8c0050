"""Small dense numeric kernel: forward ops, hand-written backward, grad checking.

Tensors are plain 2-D ``numpy.ndarray`` objects.  Every matrix product in the
model goes through :func:`gemm` or :func:`bmm` so that FLOPs can be counted
with :func:`count_flops`.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


@dataclass(eq=False)
class Param:
    """A named trainable array with a gradient buffer of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    frozen: bool = False

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad {self.grad.shape} != value {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------

_FLOP_COUNTERS: list[dict] = []


@contextlib.contextmanager
def count_flops():
    """Count multiply-add FLOPs (2*m*k*n per product) of gemm/bmm calls in scope."""
    counter = {"flops": 0, "calls": 0}
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


def _record(flops: int):
    for c in _FLOP_COUNTERS:
        c["flops"] += flops
        c["calls"] += 1


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"gemm: cannot multiply {a.shape} by {b.shape}")
    if _FLOP_COUNTERS:
        _record(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched product over a leading batch axis: (B,m,k) @ (B,k,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    if _FLOP_COUNTERS:
        _record(2 * a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    return np.matmul(a, b)


def masked_softmax_rows(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Softmax over the allowed entries of each row (works on any leading batch axes).

    Disallowed entries are exactly zero.  A row with nothing allowed is all zero.
    """
    if scores.shape[-2:] != allowed.shape[-2:]:
        raise DimensionError(f"masked_softmax_rows: scores {scores.shape} vs mask {allowed.shape}")
    allowed = np.broadcast_to(allowed, scores.shape)
    if scores.shape[-1] == 0:
        return np.zeros_like(scores)
    masked = np.where(allowed, scores, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(allowed, np.exp(masked - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def softmax_rows_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient wrt scores given softmax output p and upstream dp (masked entries give 0)."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6):
    """Returns (y, inv_rms).  y = x / sqrt(mean(x^2) + eps) * gamma."""
    if gamma.shape[-1] != x.shape[-1]:
        raise DimensionError(f"rms_norm: gamma {gamma.shape} vs x {x.shape}")
    ms = (x * x).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        inv = np.where(ms + eps > 0, 1.0 / np.sqrt(ms + eps), 0.0)
    return x * inv * gamma, inv


def rms_norm_backward(dy, x, gamma, inv):
    """Returns (dx, dgamma)."""
    xhat = x * inv
    dgamma = (dy * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    n = x.shape[-1]
    dx = inv * (dxhat - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
    return dx, dgamma


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def swiglu_ffn(x, w_gate, w_up, w_down):
    """silu(x @ w_gate) * (x @ w_up) @ w_down.  Weights may be Params or arrays.

    Returns (y, cache) where cache feeds :func:`swiglu_ffn_backward`.
    """
    wg, wu, wd = (_val(w) for w in (w_gate, w_up, w_down))
    a = gemm(x, wg)
    b = gemm(x, wu)
    h = silu(a) * b
    return gemm(h, wd), (x, a, b, h)


def swiglu_ffn_backward(dy, cache, w_gate, w_up, w_down):
    """Accumulates weight gradients into the Params and returns dx."""
    x, a, b, h = cache
    wd = _val(w_down)
    w_down.grad += gemm(h.T, dy)
    dh = gemm(dy, wd.T)
    da = dh * b * silu_grad(a)
    db = dh * silu(a)
    w_gate.grad += gemm(x.T, da)
    w_up.grad += gemm(x.T, db)
    return gemm(da, _val(w_gate).T) + gemm(db, _val(w_up).T)


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean next-token cross-entropy over rows where mask is true.

    Returns (loss, dlogits).
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: empty loss mask (degenerate batch)")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.nonzero(mask)[0]
    loss = -logp[rows, targets[rows]].sum() / n
    dlogits = np.zeros_like(logits)
    dlogits[rows] = np.exp(logp[rows])
    dlogits[rows, targets[rows]] -= 1.0
    dlogits /= n
    return float(loss), dlogits


def _val(w):
    return w.value if isinstance(w, Param) else w


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_and_grads: Callable[[], float],
    params: Iterable[Param],
    h: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
    richardson: bool = True,
) -> dict:
    """Compare analytic gradients with central differences.

    ``loss_and_grads`` must zero grads, run forward+backward and return the loss.
    Checks every entry, or ``samples_per_param`` random entries per Param.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on near-zero entries from dominating.  ``richardson`` combines
    steps h and h/2 to cancel the O(h^2) truncation term.
    Returns ``{"max_rel_err": float, "per_param": {name: err}}``.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ValueError(f"grad_check step {h} outside [1e-5, 1e-3]")
    rng = rng or np.random.default_rng(0)
    params = list(params)
    loss_and_grads()
    analytic = {id(p): p.grad.copy() for p in params}
    per_param = {}
    seen = set()
    for p in params:
        if id(p) in seen:
            continue
        seen.add(id(p))
        if p.value.dtype != np.float64:
            raise VerificationError(f"grad_check needs float64, {p.name} is {p.value.dtype}")
        g = analytic[id(p)]
        if not np.all(np.isfinite(g)):
            raise VerificationError(f"non-finite analytic gradient in {p.name}")
        flat = p.value.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples_per_param, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]

            def central(step):
                flat[i] = old + step
                lp = loss_and_grads()
                flat[i] = old - step
                lm = loss_and_grads()
                flat[i] = old
                return (lp - lm) / (2 * step)

            num = central(h)
            if richardson:
                num = (4.0 * central(h / 2) - num) / 3.0
            if not math.isfinite(num):
                raise VerificationError(f"non-finite numeric gradient in {p.name}[{i}]")
            worst = max(worst, relative_error(float(g.reshape(-1)[i]), num, floor))
        per_param[p.name] = worst
    loss_and_grads()
    return {"max_rel_err": max(per_param.values(), default=0.0), "per_param": per_param}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "streamlmm-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict):
    """Write a ``.npz`` archive: one little-endian ``.npy`` member per parameter
    plus a ``__meta__`` member holding UTF-8 JSON (format, version, config)."""
    out = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        out[name] = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **meta}
    out["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **out)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return arrays, meta
