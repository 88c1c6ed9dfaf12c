"""Chained tubelet generation and the tubelet text file.

A tubelet of length ``l`` grows forward from a spatial anchor: features are
pooled at the current anchor on the next ``w`` frames, the regression layer
predicts movements for the ``w - 1`` later frames, and the last decoded box
becomes the anchor of the following window. A final window that runs past the
tubelet (or the video) is evaluated as usual and its extra outputs dropped;
frames beyond the video end are pooled on the last frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DEFAULT_EXP_CAP, decode_array, encode_array
from .synthworld import SyntheticVideo, pool_regression_batch, pool_regression_features
from .tpn import NormalizationStats, RegressionLayer, predict_movements

TUBELET_FORMAT = "tubeletkit-tubelets"
TUBELET_VERSION = 1
MIN_SIZE = 4.0


@dataclass
class TubeletProposal:
    anchor_frame: int
    boxes: np.ndarray  # (l, 4)
    source_anchor: np.ndarray  # (4,)
    capped_decodes: int = 0
    clamped: int = 0
    scores: np.ndarray | None = None  # (l, C + 1)
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.boxes.shape[0]

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.anchor_frame, self.anchor_frame + self.length)


def clamp_boxes(boxes: np.ndarray, width: float, height: float, min_size: float = MIN_SIZE):
    """Clamp sizes to ``[min_size, frame side]`` and centers into the frame; returns (boxes, changed mask)."""
    out = boxes.copy()
    out[..., 2] = np.clip(out[..., 2], min_size, width)
    out[..., 3] = np.clip(out[..., 3], min_size, height)
    out[..., 0] = np.clip(out[..., 0], 0.0, width)
    out[..., 1] = np.clip(out[..., 1], 0.0, height)
    changed = np.any(out != boxes, axis=-1)
    return out, changed


def _window_frames(video: SyntheticVideo, s: int, w: int) -> list[int]:
    return [min(s + k, video.n_frames - 1) for k in range(w)]


def generate_tubelet(
    video: SyntheticVideo,
    anchor,
    start_frame: int,
    length: int,
    layer: RegressionLayer,
    stats: NormalizationStats,
    cap: float = DEFAULT_EXP_CAP,
) -> TubeletProposal:
    """Grow one tubelet, pooling and predicting for this anchor alone."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if start_frame < 0 or start_frame + length > video.n_frames:
        raise ValueError(f"tubelet [{start_frame}, {start_frame + length}) exceeds video of {video.n_frames} frames")
    w = layer.window
    src = np.asarray(anchor, dtype=np.float64).reshape(4)
    cur, was_clamped = clamp_boxes(src[None], video.width, video.height)
    cur = cur[0]
    boxes = np.empty((length, 4))
    boxes[0] = cur
    capped = 0
    clamped = int(was_clamped[0])
    pos = 0
    while pos < length - 1:
        s = start_frame + pos
        feats = [pool_regression_features(video, cur, fr) for fr in _window_frames(video, s, w)]
        deltas = predict_movements(layer, stats, np.concatenate(feats))
        dec, cap_mask = decode_array(cur, deltas, cap)
        dec, clamp_mask = clamp_boxes(dec, video.width, video.height)
        n_new = min(w - 1, length - 1 - pos)
        boxes[pos + 1 : pos + 1 + n_new] = dec[:n_new]
        capped += int(cap_mask[:n_new].sum())
        clamped += int(clamp_mask[:n_new].sum())
        pos += n_new
        cur = boxes[pos]
    return TubeletProposal(start_frame, boxes, src.copy(), capped, clamped)


def generate_all(
    video: SyntheticVideo,
    anchors_by_frame: dict,
    length: int,
    layer: RegressionLayer,
    stats: NormalizationStats,
    cap: float = DEFAULT_EXP_CAP,
) -> list[TubeletProposal]:
    """One tubelet per (anchor frame, anchor), all anchors of a frame advanced together.

    Output order is ascending anchor frame, then proposal order. Results are
    bit-identical to calling :func:`generate_tubelet` per anchor.
    """
    out: list[TubeletProposal] = []
    w = layer.window
    for s0 in sorted(anchors_by_frame):
        src = np.asarray(anchors_by_frame[s0], dtype=np.float64).reshape(-1, 4)
        n = len(src)
        if n == 0:
            continue
        if s0 < 0 or s0 + length > video.n_frames:
            raise ValueError(f"tubelets from frame {s0} with length {length} exceed the video")
        cur, clamped_mask = clamp_boxes(src, video.width, video.height)
        boxes = np.empty((n, length, 4))
        boxes[:, 0] = cur
        capped = np.zeros(n, dtype=np.int64)
        clamped = clamped_mask.astype(np.int64)
        pos = 0
        while pos < length - 1:
            s = s0 + pos
            feats = np.concatenate([pool_regression_batch(video, cur, fr) for fr in _window_frames(video, s, w)], axis=1)
            deltas = predict_movements(layer, stats, feats)
            dec, cap_mask = decode_array(cur[:, None, :], deltas, cap)
            dec, clamp_mask = clamp_boxes(dec, video.width, video.height)
            n_new = min(w - 1, length - 1 - pos)
            boxes[:, pos + 1 : pos + 1 + n_new] = dec[:, :n_new]
            capped += cap_mask[:, :n_new].sum(axis=1)
            clamped += clamp_mask[:, :n_new].sum(axis=1)
            pos += n_new
            cur = boxes[:, pos].copy()
        for i in range(n):
            out.append(TubeletProposal(int(s0), boxes[i], src[i].copy(), int(capped[i]), int(clamped[i])))
    return out


def ideal_tubelet(anchor, track_boxes: np.ndarray) -> np.ndarray:
    """Boxes obtained by applying a GT track's own relative motion to ``anchor``."""
    g = np.asarray(track_boxes, dtype=np.float64)
    return decode_array(np.asarray(anchor, dtype=np.float64), encode_array(g[0], g), cap=np.inf)[0]


# ---------------------------------------------------------------------------
# text file: one row per (tubelet, frame); floats use the shortest round-trip repr


def write_tubelets(path, tubelets: list[TubeletProposal], n_scores: int | None = None) -> None:
    """Write tubelets as tab-separated rows.

    Columns: ``tubelet_id frame x y w h [score_0 .. score_C]``. Score columns are
    present when ``n_scores`` is given (or inferred from scored tubelets).
    """
    if n_scores is None:
        n_scores = next((t.scores.shape[1] for t in tubelets if t.scores is not None), 0)
    cols = ["tubelet_id", "frame", "x", "y", "w", "h"] + [f"score_{k}" for k in range(n_scores)]
    lines = [f"# {TUBELET_FORMAT} v{TUBELET_VERSION}", "\t".join(cols)]
    for tid, t in enumerate(tubelets):
        for k in range(t.length):
            row = [str(tid), str(t.anchor_frame + k)] + [repr(float(v)) for v in t.boxes[k]]
            if n_scores:
                if t.scores is None:
                    raise ValueError(f"tubelet {tid} has no scores")
                row += [repr(float(v)) for v in t.scores[k]]
            lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tubelets(path) -> list[TubeletProposal]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {TUBELET_FORMAT} v{TUBELET_VERSION}":
        raise ValueError(f"{path}: not a {TUBELET_FORMAT} v{TUBELET_VERSION} file")
    cols = lines[1].split("\t")
    n_scores = len(cols) - 6
    rows: dict[int, list] = {}
    for line in lines[2:]:
        parts = line.split("\t")
        rows.setdefault(int(parts[0]), []).append(parts)
    out = []
    for tid in sorted(rows):
        r = rows[tid]
        frames = [int(p[1]) for p in r]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise ValueError(f"{path}: tubelet {tid} frames are not consecutive")
        boxes = np.array([[float(v) for v in p[2:6]] for p in r])
        scores = np.array([[float(v) for v in p[6:]] for p in r]) if n_scores else None
        out.append(TubeletProposal(frames[0], boxes, boxes[0].copy(), scores=scores))
    return out
