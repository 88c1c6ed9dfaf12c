"""A small float64 layer kit: dense, LSTM, losses, SGD with momentum, grad checks.

Parameters live in plain ``dict[str, np.ndarray]`` maps so optimizers, gradient
checks and checkpoints all share one representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from . import kernels

CHECKPOINT_FORMAT = "tubeletkit-checkpoint"
CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf."""


def _check_dim(name: str, got: int, want: int) -> None:
    if got != want:
        raise ValueError(f"{name}: expected dimension {want}, got {got}")


# ---------------------------------------------------------------------------
# dense


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError(f"inconsistent dense shapes {self.weights.shape} / {self.bias.shape}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, std: float, rng: np.random.Generator) -> DenseLayer:
        return cls(rng.normal(0.0, std, size=(in_dim, out_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.w": self.weights, f"{prefix}.b": self.bias}

    def copy(self) -> DenseLayer:
        return DenseLayer(self.weights.copy(), self.bias.copy())


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Affine map of a vector or a row batch.

    Uses the fixed-order kernel so each row's result is independent of the batch
    it arrives in.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None] if single else x
    _check_dim("dense input", rows.shape[1], layer.in_dim)
    out = kernels.affine_rows(rows, layer.weights, layer.bias)
    return out[0] if single else out


def dense_backward(layer: DenseLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for row batches."""
    return grad_out @ layer.weights.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> LstmState:
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class LstmCell:
    """Gate blocks along the last axis are ordered input, forget, output, candidate."""

    wx: np.ndarray  # (f, 4H)
    wh: np.ndarray  # (H, 4H)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        self.wx = np.asarray(self.wx, dtype=np.float64)
        self.wh = np.asarray(self.wh, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        h4 = self.wh.shape[1]
        if h4 % 4 or self.wh.shape[0] * 4 != h4 or self.wx.shape[1] != h4 or self.b.shape != (h4,):
            raise ValueError(f"inconsistent LSTM shapes {self.wx.shape} {self.wh.shape} {self.b.shape}")

    @classmethod
    def init(cls, input_dim: int, hidden: int, std: float, rng: np.random.Generator) -> LstmCell:
        return cls(
            rng.normal(0.0, std, size=(input_dim, 4 * hidden)),
            rng.normal(0.0, std, size=(hidden, 4 * hidden)),
            np.zeros(4 * hidden),
        )

    @property
    def input_dim(self) -> int:
        return self.wx.shape[0]

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}


def _gates(cell: LstmCell, c, h, x):
    H = cell.hidden
    z = x @ cell.wx + h @ cell.wh + cell.b
    i = expit(z[..., :H])
    f = expit(z[..., H : 2 * H])
    o = expit(z[..., 2 * H : 3 * H])
    g = np.tanh(z[..., 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return i, f, o, g, c_new, tc


def lstm_step(cell: LstmCell, state: LstmState, x: np.ndarray) -> LstmState:
    """One LSTM update for a single input vector or a row batch."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim("lstm input", x.shape[-1], cell.input_dim)
    _check_dim("lstm state", state.h.shape[-1], cell.hidden)
    _, _, o, _, c_new, tc = _gates(cell, state.c, state.h, x)
    return LstmState(c_new, o * tc)


def lstm_sequence(cell: LstmCell, xs: np.ndarray, state: LstmState | None = None):
    """Run ``xs`` of shape ``(T, B, f)``; return hidden states ``(T, B, H)``, final state, cache."""
    T, B, f = xs.shape
    _check_dim("lstm input", f, cell.input_dim)
    if state is None:
        state = LstmState.zeros(cell.hidden, B)
    c, h = state.c, state.h
    hs = np.empty((T, B, cell.hidden))
    steps = []
    for t in range(T):
        i, fg, o, g, c_new, tc = _gates(cell, c, h, xs[t])
        steps.append((xs[t], c, h, i, fg, o, g, tc))
        c, h = c_new, o * tc
        hs[t] = h
    return hs, LstmState(c, h), steps


def lstm_sequence_backward(cell: LstmCell, steps, dhs: np.ndarray, d_final: LstmState | None = None):
    """Backprop through :func:`lstm_sequence`.

    ``dhs`` is the loss gradient w.r.t. each emitted hidden state; ``d_final``
    carries gradient into the final ``(c, h)``. Returns ``(grads, dxs, d_initial)``
    where ``grads`` has keys ``wx``, ``wh``, ``b``.
    """
    T = len(steps)
    B = dhs.shape[1]
    H = cell.hidden
    gwx = np.zeros_like(cell.wx)
    gwh = np.zeros_like(cell.wh)
    gb = np.zeros_like(cell.b)
    dxs = np.empty((T, B, cell.input_dim))
    if d_final is None:
        dc_next = np.zeros((B, H))
        dh_next = np.zeros((B, H))
    else:
        dc_next, dh_next = d_final.c.copy(), d_final.h.copy()
    for t in range(T - 1, -1, -1):
        x, c_prev, h_prev, i, f, o, g, tc = steps[t]
        dh = dhs[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                do * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ],
            axis=1,
        )
        gwx += x.T @ dz
        gwh += h_prev.T @ dz
        gb += dz.sum(axis=0)
        dxs[t] = dz @ cell.wx.T
        dh_next = dz @ cell.wh.T
        dc_next = dc * f
    return {"wx": gwx, "wh": gwh, "b": gb}, dxs, LstmState(dc_next, dh_next)


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def smoothed_l1_loss(pred: np.ndarray, target: np.ndarray):
    """Sum of smoothed-L1 over all components, averaged over the leading axis."""
    r = pred - target
    a = np.abs(r)
    n = pred.shape[0]
    loss = np.where(a < 1.0, 0.5 * r * r, a - 0.5).sum() / n
    return float(loss), np.clip(r, -1.0, 1.0) / n


# ---------------------------------------------------------------------------
# optimizer


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class SgdMomentum:
    """Classical (heavy-ball) momentum: ``v <- mu v - lr g``, ``p <- p + v``."""

    def __init__(self, learning_rate: float, momentum: float = 0.9, clip_norm: float | None = None):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place. Nothing is modified if any gradient is non-finite."""
        if set(grads) != set(params):
            raise ValueError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
        scale = 1.0
        if self.clip_norm is not None:
            norm = global_norm(grads)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name in sorted(params):
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(params[name])
            v *= self.momentum
            v -= self.learning_rate * scale * grads[name]
            params[name] += v


# ---------------------------------------------------------------------------
# gradient checking

LossFn = Callable[[dict[str, np.ndarray]], "tuple[float, dict[str, np.ndarray]]"]


def grad_check(
    loss_fn: LossFn,
    params: dict[str, np.ndarray],
    epsilon: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)``. Entries are perturbed in place
    and restored. With ``max_entries`` only a seeded sample of entries per
    parameter is checked.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    analytic = {k: np.array(v, copy=True) for k, v in grads.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ga = analytic[name].reshape(-1)
        for k in idx:
            old = flat[k]
            flat[k] = old + epsilon
            lp = loss_fn(params)[0]
            flat[k] = old - epsilon
            lm = loss_fn(params)[0]
            flat[k] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError(f"loss not finite while perturbing {name}[{k}]")
            num = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(ga[k]), abs(num), 1e-8)
            worst = max(worst, abs(ga[k] - num) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float tensors plus JSON metadata to an ``.npz`` container."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": {k: list(np.shape(v)) for k, v in sorted(tensors.items())},
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v) for k, v in tensors.items()}
    if _META_KEY in arrays:
        raise ValueError(f"tensor name {_META_KEY!r} is reserved")
    arrays[_META_KEY] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        header = json.loads(str(data[_META_KEY]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        tensors = {k: data[k].copy() for k in data.files if k != _META_KEY}
    for name, shape in header["tensors"].items():
        if list(tensors[name].shape) != shape:
            raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, header says {shape}")
    return tensors, header["meta"]
