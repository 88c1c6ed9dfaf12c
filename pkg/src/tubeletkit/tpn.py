"""Tubelet proposal network: training pairs, movement regression, block init.

The regression layer maps the concatenated features of ``w`` frames pooled at a
fixed spatial anchor to ``4 (w - 1)`` normalized movement values, one 4-block
per later frame (frame 1 of the window is the anchor itself).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import encode_array
from .nncore import (
    DenseLayer,
    NonFiniteError,
    SgdMomentum,
    dense_forward,
    load_checkpoint,
    save_checkpoint,
    smoothed_l1_loss,
)
from .synthworld import SyntheticVideo, pool_regression_batch, static_proposals

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


@dataclass
class RegressionLayer:
    dense: DenseLayer  # (f * w) -> 4 (w - 1)
    window: int
    feature_dim: int

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        want = (self.feature_dim * self.window, 4 * (self.window - 1))
        if self.dense.weights.shape != want:
            raise ValueError(f"regression weights {self.dense.weights.shape}, expected {want}")

    @classmethod
    def random(cls, feature_dim: int, window: int, std: float, rng: np.random.Generator) -> RegressionLayer:
        return cls(DenseLayer.init(feature_dim * window, 4 * (window - 1), std, rng), window, feature_dim)

    @property
    def W(self) -> np.ndarray:
        return self.dense.weights

    @property
    def b(self) -> np.ndarray:
        return self.dense.bias

    def copy(self) -> RegressionLayer:
        return RegressionLayer(self.dense.copy(), self.window, self.feature_dim)


@dataclass
class NormalizationStats:
    mean: np.ndarray  # (w - 1, 4)
    std: np.ndarray  # (w - 1, 4)

    @classmethod
    def from_targets(cls, targets: np.ndarray) -> NormalizationStats:
        """Per frame-offset, per component moments of a ``(N, w - 1, 4)`` target set."""
        if targets.shape[0] == 0:
            raise ValueError("cannot compute statistics of an empty target set")
        return cls(targets.mean(axis=0), np.maximum(targets.std(axis=0), SIGMA_FLOOR))

    @classmethod
    def identity(cls, window: int) -> NormalizationStats:
        return cls(np.zeros((window - 1, 4)), np.ones((window - 1, 4)))


@dataclass
class TrainingSet:
    """Stacked training samples for one window size."""

    window: int
    anchors: np.ndarray  # (N, 4)
    features: np.ndarray  # (N, w * f)
    targets: np.ndarray  # (N, w - 1, 4) raw target deltas
    track_boxes: np.ndarray  # (N, w, 4) GT boxes over the window
    video_index: np.ndarray  # (N,)
    track_index: np.ndarray  # (N,)
    start_frame: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.anchors.shape[0]

    def subset(self, idx) -> TrainingSet:
        return TrainingSet(
            self.window,
            self.anchors[idx],
            self.features[idx],
            self.targets[idx],
            self.track_boxes[idx],
            self.video_index[idx],
            self.track_index[idx],
            self.start_frame[idx],
        )


@dataclass
class TpnConfig:
    window: int = 2
    init: str = "random"  # random | block
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 20
    batch: int = 64
    init_std: float = 0.01
    clip_norm: float | None = None
    scale_lr_by_window: bool = False
    rebase_block_init: bool = True
    seed: int = 0


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# supervision


def match_anchors(proposals: np.ndarray, gt_boxes: np.ndarray, threshold: float = 0.5) -> list[tuple[int, int]]:
    """``(proposal index, gt index)`` pairs whose best IoU exceeds ``threshold``.

    Each proposal goes to its argmax-IoU GT box (ties to the lower index);
    proposals whose best IoU is not above ``threshold`` are left out.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0 or len(gt_boxes) == 0:
        return []
    ious = kernels.iou_matrix(proposals, gt_boxes)
    best = np.argmax(ious, axis=1)
    return [(int(i), int(best[i])) for i in range(len(proposals)) if ious[i, best[i]] > threshold]


def build_targets(anchor, track_boxes: np.ndarray) -> np.ndarray:
    """Raw targets ``(w - 1, 4)``: the GT's motion relative to its own window-start box.

    ``anchor`` is accepted for signature symmetry and deliberately unused.
    """
    g = np.asarray(track_boxes, dtype=np.float64)
    return encode_array(g[0], g[1:])


def normalize_targets(targets: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (targets - stats.mean) / stats.std


def de_normalize(outputs: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of :func:`normalize_targets` (``out * std + mean``)."""
    return outputs * stats.std + stats.mean


def build_training_set(
    videos: list[SyntheticVideo],
    window: int,
    anchor_stride: int = 1,
    proposal_kw: dict | None = None,
    match_threshold: float = 0.5,
) -> TrainingSet:
    """Positive anchors and their ``w``-frame features/targets over a video corpus.

    Proposals are drawn on every ``anchor_stride``-th frame; windows in which the
    matched track is not visible on every frame are dropped.
    """
    proposal_kw = proposal_kw or {}
    f = videos[0].oracle.feature_dim if videos else 0
    parts: dict[str, list] = {k: [] for k in ("anchors", "features", "targets", "gt", "vid", "trk", "start")}
    for vi, video in enumerate(videos):
        for s in range(0, video.n_frames - window + 1, anchor_stride):
            props = video.proposals.get(s)
            if props is None:
                props = static_proposals(video, s, **proposal_kw)
            gt, track_idx = video.gt(s)
            pairs = match_anchors(props, gt, match_threshold)
            keep = [(p, track_idx[g]) for p, g in pairs if video.visibility[track_idx[g], s : s + window].all()]
            if not keep:
                continue
            anchors = props[[p for p, _ in keep]]
            tracks = np.array([t for _, t in keep], dtype=np.int64)
            feats = np.concatenate([pool_regression_batch(video, anchors, s + k) for k in range(window)], axis=1)
            gt_win = video.track_boxes[tracks, s : s + window]
            parts["anchors"].append(anchors)
            parts["features"].append(feats)
            parts["targets"].append(encode_array(gt_win[:, :1], gt_win[:, 1:]))
            parts["gt"].append(gt_win)
            parts["vid"].append(np.full(len(keep), vi, dtype=np.int64))
            parts["trk"].append(tracks)
            parts["start"].append(np.full(len(keep), s, dtype=np.int64))
    if not parts["anchors"]:
        return TrainingSet(window, np.zeros((0, 4)), np.zeros((0, window * f)), np.zeros((0, window - 1, 4)),
                           np.zeros((0, window, 4)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
    return TrainingSet(
        window,
        np.concatenate(parts["anchors"]),
        np.concatenate(parts["features"]),
        np.concatenate(parts["targets"]),
        np.concatenate(parts["gt"]),
        np.concatenate(parts["vid"]),
        np.concatenate(parts["trk"]),
        np.concatenate(parts["start"]),
    )


# ---------------------------------------------------------------------------
# block initialization


def block_init(two_frame: RegressionLayer, window: int) -> RegressionLayer:
    """Tile a trained 2-frame layer into a ``window``-frame layer.

    The 2-frame weights split into ``A`` (frame-1 rows) and ``B`` (frame-2 rows).
    The output block for frame ``t`` gets ``A`` on the frame-1 feature rows and
    ``B`` on the frame-``t`` rows, zeros elsewhere; the bias repeats ``b_2``.
    """
    if two_frame.window != 2:
        raise ValueError(f"block init needs a 2-frame source, got window {two_frame.window}")
    if window < 2:
        raise ValueError("window must be >= 2")
    f = two_frame.feature_dim
    if two_frame.W.shape != (2 * f, 4):
        raise ValueError("source layer dimensions do not match its feature_dim")
    A, B = two_frame.W[:f], two_frame.W[f:]
    W = np.zeros((f * window, 4 * (window - 1)))
    for t in range(1, window):
        cols = slice(4 * (t - 1), 4 * t)
        W[:f, cols] = A
        W[f * t : f * (t + 1), cols] = B
    b = np.tile(two_frame.b, window - 1)
    return RegressionLayer(DenseLayer(W, b), window, f)


def rebase_normalization(layer: RegressionLayer, source: NormalizationStats, target: NormalizationStats) -> RegressionLayer:
    """Rescale a layer trained under ``source`` stats to predict the same raw deltas under ``target``.

    ``source`` may hold a single frame-offset row, which is broadcast to every
    output block (the case for a block-initialized layer).
    """
    w1 = layer.window - 1
    s_mean = np.broadcast_to(source.mean, (w1, 4)).reshape(-1)
    s_std = np.broadcast_to(source.std, (w1, 4)).reshape(-1)
    t_mean = target.mean.reshape(-1)
    t_std = target.std.reshape(-1)
    scale = s_std / t_std
    W = layer.W * scale
    b = (layer.b * s_std + s_mean - t_mean) / t_std
    return RegressionLayer(DenseLayer(W, b), layer.window, layer.feature_dim)


# ---------------------------------------------------------------------------
# training / prediction


def tpn_loss(layer: RegressionLayer, features: np.ndarray, normalized_targets: np.ndarray):
    """Mean (over samples) summed smoothed-L1 loss and its parameter gradients."""
    out = features @ layer.W + layer.b
    loss, g = smoothed_l1_loss(out, normalized_targets.reshape(len(features), -1))
    return loss, {"w": features.T @ g, "b": g.sum(axis=0)}


def train_tpn(
    train: TrainingSet,
    config: TpnConfig,
    init_layer: RegressionLayer | None = None,
    init_stats: NormalizationStats | None = None,
    stats: NormalizationStats | None = None,
) -> tuple[RegressionLayer, NormalizationStats, TrainLog]:
    """Fit the regression layer with SGD + momentum on normalized targets.

    ``config.init == "block"`` requires the trained 2-frame ``init_layer`` (and
    its ``init_stats`` when ``rebase_block_init`` is on).
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    w = train.window
    if config.window != w:
        raise ValueError(f"config window {config.window} != training set window {w}")
    f = train.features.shape[1] // w
    rng = np.random.default_rng([config.seed, w, 0x7E9])
    if stats is None:
        stats = NormalizationStats.from_targets(train.targets)
    if config.init == "block":
        if init_layer is None:
            raise ValueError("block init needs a trained 2-frame layer")
        layer = block_init(init_layer, w)
        if config.rebase_block_init and init_stats is not None:
            layer = rebase_normalization(layer, init_stats, stats)
    elif config.init == "random":
        layer = RegressionLayer.random(f, w, config.init_std, rng)
    else:
        raise ValueError(f"unknown init mode {config.init!r}")

    targets = normalize_targets(train.targets, stats).reshape(len(train), -1)
    lr = config.learning_rate * (2.0 / w if config.scale_lr_by_window else 1.0)
    opt = SgdMomentum(lr, config.momentum, config.clip_norm)
    params = {"w": layer.dense.weights, "b": layer.dense.bias}
    history = TrainLog()
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            loss, grads = tpn_loss(layer, train.features[idx], targets[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"TPN loss diverged at epoch {epoch} (w={w}, lr={lr})")
            opt.step(params, grads)
        full, _ = tpn_loss(layer, train.features, targets)
        if not np.isfinite(full):
            raise NonFiniteError(f"TPN loss diverged at epoch {epoch} (w={w}, lr={lr})")
        history.epoch_loss.append(full)
        log.debug("stage=tpn window=%d epoch=%d metric=loss value=%.10g", w, epoch, full)
    return layer, stats, history


def predict_movements(layer: RegressionLayer, stats: NormalizationStats, features) -> np.ndarray:
    """Raw movement deltas ``(N, w - 1, 4)`` (or ``(w - 1, 4)`` for one sample).

    ``features`` is ``(N, w * f)``, ``(w * f,)`` or a sequence of ``w`` f-vectors.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1 or x.shape == (layer.window, layer.feature_dim)
    if single:
        x = x.reshape(1, -1)
    if x.shape[1] != layer.window * layer.feature_dim:
        raise ValueError(f"expected {layer.window * layer.feature_dim} features, got {x.shape[1]}")
    out = dense_forward(layer.dense, x).reshape(len(x), layer.window - 1, 4)
    out = de_normalize(out, stats)
    return out[0] if single else out


def save_tpn(path, layer: RegressionLayer, stats: NormalizationStats, meta: dict | None = None) -> None:
    save_checkpoint(
        path,
        {"tpn.w": layer.W, "tpn.b": layer.b, "stats.mean": stats.mean, "stats.std": stats.std},
        {"kind": "tpn", "window": layer.window, "feature_dim": layer.feature_dim, **(meta or {})},
    )


def load_tpn(path) -> tuple[RegressionLayer, NormalizationStats, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "tpn":
        raise ValueError(f"{path}: not a TPN checkpoint")
    layer = RegressionLayer(DenseLayer(tensors["tpn.w"], tensors["tpn.b"]), int(meta["window"]), int(meta["feature_dim"]))
    return layer, NormalizationStats(tensors["stats.mean"], tensors["stats.std"]), meta
