"""Tubelet quality, detection AP and CorLoc.

Ranking ties are broken by ascending detection index everywhere, so every
report is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import to_corners

PROTOCOLS = ("all_points", "11_point")


def iou_aligned(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally shaped ``(..., 4)`` center-form arrays."""
    ca, cb = to_corners(a), to_corners(b)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# ---------------------------------------------------------------------------
# tubelet quality


@dataclass(frozen=True)
class TubeletQualityReport:
    mad: float
    mrd: float
    mean_iou: float
    n_tubelets: int
    n_frames: int

    def __post_init__(self):
        for name in ("mad", "mrd", "mean_iou"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")
        if not 0.0 <= self.mean_iou <= 1.0:
            raise ValueError(f"mean_iou {self.mean_iou} outside [0, 1]")

    def as_dict(self) -> dict:
        return {
            "mad": self.mad,
            "mrd": self.mrd,
            "mean_iou": self.mean_iou,
            "n_tubelets": self.n_tubelets,
            "n_frames": self.n_frames,
        }


def tubelet_quality(predicted, ideal) -> TubeletQualityReport:
    """MAD, MRD and mean IoU of predicted tubelets against their ideal tubelets.

    Both arguments are sequences of ``(l_i, 4)`` arrays (or one ``(N, l, 4)``
    array) aligned frame for frame. Averages run over every (tubelet, frame,
    parameter) entry. MRD divides x and w differences by the ideal width and
    y and h differences by the ideal height.
    """
    pred = [np.asarray(p, dtype=np.float64).reshape(-1, 4) for p in predicted]
    ref = [np.asarray(p, dtype=np.float64).reshape(-1, 4) for p in ideal]
    if len(pred) != len(ref):
        raise ValueError(f"{len(pred)} predicted tubelets but {len(ref)} ideal ones")
    if not pred:
        raise ValueError("no tubelets to evaluate")
    for k, (p, r) in enumerate(zip(pred, ref)):
        if p.shape != r.shape:
            raise ValueError(f"tubelet {k}: predicted shape {p.shape} != ideal shape {r.shape}")
    P = np.concatenate(pred)
    R = np.concatenate(ref)
    diff = np.abs(P - R)
    scale = np.stack([R[:, 2], R[:, 3], R[:, 2], R[:, 3]], axis=1)
    return TubeletQualityReport(
        mad=float(diff.mean()),
        mrd=float((diff / scale).mean()),
        mean_iou=float(iou_aligned(P, R).mean()),
        n_tubelets=len(pred),
        n_frames=int(P.shape[0]),
    )


# ---------------------------------------------------------------------------
# detection AP


@dataclass
class Detections:
    """Flat detection list; ``image`` is any integer key naming a frame."""

    image: np.ndarray
    cls: np.ndarray
    boxes: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.int64).reshape(-1)
        self.cls = np.asarray(self.cls, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.image)
        if not (len(self.cls) == len(self.boxes) == len(self.scores) == n):
            raise ValueError("detection fields differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("detection scores must be finite")


@dataclass
class GroundTruth:
    image: np.ndarray
    cls: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.int64).reshape(-1)
        self.cls = np.asarray(self.cls, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if not (len(self.cls) == len(self.boxes) == len(self.image)):
            raise ValueError("ground-truth fields differ in length")


@dataclass
class DetectionReport:
    ap: dict
    mean_ap: float
    pr_curves: dict = field(default_factory=dict)
    protocol: str = "all_points"


def precision_recall(det_image, det_boxes, det_scores, gt_image, gt_boxes, iou_threshold: float = 0.5):
    """Cumulative ``(precision, recall, tp flags)`` after each ranked detection of one class."""
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable")
    tp = kernels.greedy_match(np.asarray(det_image)[order], np.asarray(det_boxes)[order], gt_image, gt_boxes, iou_threshold)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    n_gt = len(gt_image)
    precision = ctp / ranks
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    return precision, recall, tp


def ap_from_pr(precision: np.ndarray, recall: np.ndarray, protocol: str = "all_points") -> float:
    """Area under the interpolated precision-recall curve."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown AP protocol {protocol!r}; expected one of {PROTOCOLS}")
    if len(precision) == 0:
        return 0.0
    if protocol == "11_point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            sel = precision[recall >= r]
            total += sel.max() if sel.size else 0.0
        return float(total / 11.0)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def average_precision(
    detections: Detections,
    gt: GroundTruth,
    classes=None,
    iou_threshold: float = 0.5,
    protocol: str = "all_points",
) -> DetectionReport:
    """Per-class AP and their mean over classes that occur in the ground truth.

    Each GT box is matched at most once; later duplicates count as false
    positives, as do detections on frames without GT of their class.
    """
    if classes is None:
        classes = sorted(set(gt.cls.tolist()) | set(detections.cls.tolist()))
    ap: dict[int, float] = {}
    curves: dict[int, tuple] = {}
    for c in classes:
        d = detections.cls == c
        g = gt.cls == c
        if not g.any():
            continue
        p, r, _ = precision_recall(detections.image[d], detections.boxes[d], detections.scores[d], gt.image[g], gt.boxes[g], iou_threshold)
        ap[int(c)] = ap_from_pr(p, r, protocol)
        curves[int(c)] = (p, r)
    mean_ap = float(np.mean([ap[c] for c in sorted(ap)])) if ap else 0.0
    return DetectionReport(ap, mean_ap, curves, protocol)


# ---------------------------------------------------------------------------
# CorLoc


def corloc(det_image, det_boxes, det_scores, gt: GroundTruth, classes=None, iou_threshold: float = 0.5):
    """Per-class CorLoc and the average over classes with at least one evaluated frame.

    ``det_scores`` is ``(N, C)`` with column ``c`` scoring class ``c``. For each
    frame holding GT of class ``c``, the box with the top class-``c`` score is
    localized when its IoU with some class-``c`` GT box exceeds the threshold.
    Frames without that class are skipped; frames with no boxes count as misses.
    """
    det_image = np.asarray(det_image, dtype=np.int64).reshape(-1)
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(len(det_image), -1)
    if classes is None:
        classes = sorted(set(gt.cls.tolist()))
    per_class: dict[int, float] = {}
    for c in classes:
        frames = np.unique(gt.image[gt.cls == c])
        if frames.size == 0:
            continue
        hits = 0
        for fr in frames:
            rows = np.flatnonzero(det_image == fr)
            if rows.size == 0:
                continue
            best = rows[int(np.argmax(det_scores[rows, c]))]
            g = gt.boxes[(gt.image == fr) & (gt.cls == c)]
            if np.max(kernels.iou_matrix(det_boxes[best : best + 1], g)[0]) > iou_threshold:
                hits += 1
        per_class[int(c)] = hits / frames.size
    mean = float(np.mean([per_class[c] for c in sorted(per_class)])) if per_class else 0.0
    return per_class, mean


# ---------------------------------------------------------------------------
# text output


def format_report(values: dict, prefix: str = "") -> str:
    """``key=value`` lines in insertion order; floats use ``repr`` precision."""
    lines = []
    for k, v in values.items():
        key = f"{prefix}{k}"
        if isinstance(v, float):
            lines.append(f"{key}={v!r}")
        else:
            lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def format_table(rows: list[dict], columns: list[str], digits: int = 4) -> str:
    """Fixed-width text table; float cells rounded to ``digits`` places."""

    def cell(v):
        return f"{v:.{digits}f}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    out = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(out) + "\n"
