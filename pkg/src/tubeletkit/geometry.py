"""Center-form boxes, IoU, and the movement codec used for tubelet supervision.

Single boxes are :class:`Box` values; bulk code works on ``(N, 4)`` float arrays
in the same ``(x, y, w, h)`` center form.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

DEFAULT_EXP_CAP = 10.0


class MalformedDeltaError(ValueError):
    """A size log-ratio exceeded the decode cap."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> Box:
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @classmethod
    def from_array(cls, a) -> Box:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


class DeltaKind(str, enum.Enum):
    RAW = "raw"
    TARGET = "target"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class MovementDelta:
    dx: float
    dy: float
    dw: float
    dh: float
    kind: DeltaKind = DeltaKind.RAW

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise ValueError("movement delta components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    @classmethod
    def from_array(cls, a, kind: DeltaKind = DeltaKind.RAW) -> MovementDelta:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), DeltaKind(kind))


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2.0, c[..., 2:] - c[..., :2]], axis=-1)


def validate_boxes(boxes: np.ndarray) -> np.ndarray:
    """Return ``boxes`` as float64 ``(..., 4)``; reject non-finite or non-positive sizes."""
    b = np.asarray(boxes, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ValueError(f"expected trailing dimension 4, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError("non-finite box coordinates")
    if np.any(b[..., 2:] <= 0):
        raise ValueError("box sizes must be positive")
    return b


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    return float(kernels.iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return kernels.iou_matrix(a, b)


def encode_array(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Vectorized movement encoding of ``boxes`` relative to ``anchors`` (broadcasting)."""
    a = np.asarray(anchors, dtype=np.float64)
    b = np.asarray(boxes, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape)
    out[..., 0] = (b[..., 0] - a[..., 0]) / a[..., 2]
    out[..., 1] = (b[..., 1] - a[..., 1]) / a[..., 3]
    out[..., 2] = np.log(b[..., 2] / a[..., 2])
    out[..., 3] = np.log(b[..., 3] / a[..., 3])
    return out


def decode_array(anchors: np.ndarray, deltas: np.ndarray, cap: float = DEFAULT_EXP_CAP):
    """Vectorized inverse of :func:`encode_array`.

    Size log-ratios beyond ``cap`` are clipped rather than raised; the returned
    boolean mask marks the rows that were clipped.
    """
    a = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    a, d = np.broadcast_arrays(a, d)
    logs = d[..., 2:]
    capped = np.any(np.abs(logs) > cap, axis=-1)
    logs = np.clip(logs, -cap, cap)
    out = np.empty(a.shape)
    out[..., 0] = a[..., 0] + d[..., 0] * a[..., 2]
    out[..., 1] = a[..., 1] + d[..., 1] * a[..., 3]
    out[..., 2] = a[..., 2] * np.exp(logs[..., 0])
    out[..., 3] = a[..., 3] * np.exp(logs[..., 1])
    return out, capped


def encode_movement(anchor: Box, current: Box) -> MovementDelta:
    """Relative movement of ``current`` w.r.t. the frame-1 box ``anchor``."""
    return MovementDelta(
        (current.x - anchor.x) / anchor.w,
        (current.y - anchor.y) / anchor.h,
        math.log(current.w / anchor.w),
        math.log(current.h / anchor.h),
        DeltaKind.RAW,
    )


def decode_movement(anchor: Box, delta: MovementDelta, cap: float = DEFAULT_EXP_CAP) -> Box:
    """Apply a raw movement delta to ``anchor``.

    Raises :class:`MalformedDeltaError` when ``|dw|`` or ``|dh|`` exceeds ``cap``.
    """
    if delta.kind is not DeltaKind.RAW:
        raise ValueError(f"decode expects a raw delta, got {delta.kind.value}")
    if abs(delta.dw) > cap or abs(delta.dh) > cap:
        raise MalformedDeltaError(f"size log-ratio beyond cap {cap}: ({delta.dw}, {delta.dh})")
    return Box(
        anchor.x + delta.dx * anchor.w,
        anchor.y + delta.dy * anchor.h,
        anchor.w * math.exp(delta.dw),
        anchor.h * math.exp(delta.dh),
    )


def smoothed_l1(x):
    """0.5 x^2 inside the unit interval, |x| - 0.5 outside."""
    a = np.abs(x)
    out = np.where(a < 1.0, 0.5 * np.square(x), a - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smoothed_l1_grad(x):
    out = np.clip(x, -1.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out
