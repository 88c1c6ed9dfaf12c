"""Synthetic videos: ground-truth tracks, jittered static proposals, feature oracles.

No pixels are ever rendered. A box's "pooled feature" is a fixed linear
projection of a small code vector describing what the box sees, plus Gaussian
noise that is a pure function of ``(video seed, frame, box quantized to 0.25 px)``.

Regression code
    ``[appearance of the nearest visible object within R, gain * geometry]``,
    or a fixed background code when nothing lies within ``R`` of the box center.
    ``geometry`` is the object's center offset from the box divided by the
    object's own size (``offset_reference="object"``, the default) or by the box
    size (``"box"``), followed by the log size ratios. With the default and no
    noise, movement targets are an exact linear function of the features of a
    window pooled at one anchor whenever one object stays nearest to it and
    keeps its size; a changing size makes the offset terms bilinear.

Classification code
    ``[iou * onehot(code class), iou * phase, 1 - iou]`` against the best
    overlapping object. Classes in an ambiguous pair share one code class and
    are separable only through the sign pattern of the phase channel over time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import encode_array, validate_boxes

DATASET_FORMAT = "tubeletkit-video"
DATASET_VERSION = 1
MOTION_KINDS = ("linear", "sinusoidal", "scale-change", "piecewise-random-walk")

_REG_STREAM = 0
_CLS_STREAM = 1


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


@dataclass(frozen=True)
class FeatureOracleParams:
    feature_dim: int = 32
    projection_seed: int = 7
    noise_std: float = 0.05
    receptive_radius: float = 90.0
    class_signal_dim: int = 8
    temporal_ambiguity: bool = False
    ambiguous_pairs: tuple = ((0, 1),)
    appearance_dim: int = 8
    geometry_gain: float = 2.0
    phase_period: int = 4
    offset_reference: str = "object"

    def __post_init__(self):
        if self.offset_reference not in ("object", "box"):
            raise ConfigError("offset_reference must be 'object' or 'box'")
        if self.feature_dim < 8:
            raise ConfigError("feature_dim must be >= 8")
        if self.receptive_radius <= 0:
            raise ConfigError("receptive_radius must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.appearance_dim + 4 > self.feature_dim or self.class_signal_dim + 2 > self.feature_dim:
            raise ConfigError("code dimensions exceed feature_dim")
        if self.phase_period < 4 or self.phase_period % 4:
            raise ConfigError("phase_period must be a positive multiple of 4")
        object.__setattr__(self, "ambiguous_pairs", tuple(tuple(int(c) for c in p) for p in self.ambiguous_pairs))


@dataclass(frozen=True)
class WorldConfig:
    width: float = 480.0
    height: float = 270.0
    n_frames: int = 60
    n_classes: int = 4
    min_tracks: int = 2
    max_tracks: int = 4
    size_range: tuple = (36.0, 72.0)
    aspect_range: tuple = (0.75, 1.33)
    min_size: float = 4.0
    min_separation: float = 40.0
    motion_mix: tuple = (("linear", 0.35), ("sinusoidal", 0.2), ("scale-change", 0.2), ("piecewise-random-walk", 0.25))
    speed_range: tuple = (1.0, 6.0)
    amplitude_range: tuple = (15.0, 50.0)
    period_range: tuple = (16.0, 48.0)
    scale_rate_range: tuple = (0.985, 1.015)
    walk_std: float = 1.0
    walk_segment: int = 8
    partial_visibility_prob: float = 0.15
    oracle: FeatureOracleParams = field(default_factory=FeatureOracleParams)

    def __post_init__(self):
        object.__setattr__(self, "size_range", tuple(float(v) for v in self.size_range))
        object.__setattr__(self, "aspect_range", tuple(float(v) for v in self.aspect_range))
        object.__setattr__(self, "motion_mix", tuple((str(k), float(p)) for k, p in self.motion_mix))
        for name in ("speed_range", "amplitude_range", "period_range", "scale_rate_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if isinstance(self.oracle, dict):
            object.__setattr__(self, "oracle", FeatureOracleParams(**self.oracle))
        self.validate()

    def validate(self) -> None:
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if not 1 <= self.min_tracks <= self.max_tracks:
            raise ConfigError("need 1 <= min_tracks <= max_tracks")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ConfigError("size_range must be positive and ordered")
        if hi * max(1.0, self.aspect_range[1]) > min(self.width, self.height):
            raise ConfigError("objects may be larger than the frame")
        for kind, p in self.motion_mix:
            if kind not in MOTION_KINDS or p < 0:
                raise ConfigError(f"bad motion_mix entry ({kind}, {p})")
        if sum(p for _, p in self.motion_mix) <= 0:
            raise ConfigError("motion_mix weights sum to zero")
        if self.oracle.class_signal_dim < self.n_classes:
            raise ConfigError("class_signal_dim must be >= n_classes")
        for pair in self.oracle.ambiguous_pairs:
            if len(pair) != 2 or pair[0] == pair[1] or not all(0 <= c < self.n_classes for c in pair):
                raise ConfigError(f"bad ambiguous pair {pair}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motion_mix"] = [list(kv) for kv in self.motion_mix]
        d["oracle"]["ambiguous_pairs"] = [list(p) for p in self.oracle.ambiguous_pairs]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        if "oracle" in d:
            o = dict(d["oracle"])
            okeys = {f.name for f in fields(FeatureOracleParams)}
            if set(o) - okeys:
                raise ConfigError(f"unknown oracle keys: {sorted(set(o) - okeys)}")
            if "ambiguous_pairs" in o:
                o["ambiguous_pairs"] = tuple(tuple(p) for p in o["ambiguous_pairs"])
            d["oracle"] = FeatureOracleParams(**o)
        if "motion_mix" in d:
            d["motion_mix"] = tuple(tuple(kv) for kv in d["motion_mix"])
        return cls(**d)


@dataclass(frozen=True)
class MotionProgram:
    kind: str
    params: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(sorted(self.params.items()))}


@dataclass
class ObjectTrack:
    class_id: int
    boxes: np.ndarray  # (T, 4) center form
    visible: np.ndarray  # (T,) bool
    appearance_seed: int
    phase_offset: int = 0
    motion: MotionProgram | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if not self.visible.any():
            raise ConfigError("track has no visible frame")
        validate_boxes(self.boxes)


@dataclass
class SyntheticVideo:
    seed: int
    config: WorldConfig
    tracks: list
    proposals: dict = field(default_factory=dict)  # frame -> (N, 4)

    @property
    def n_frames(self) -> int:
        return self.config.n_frames

    @property
    def width(self) -> float:
        return self.config.width

    @property
    def height(self) -> float:
        return self.config.height

    @property
    def oracle(self) -> FeatureOracleParams:
        return self.config.oracle

    @cached_property
    def track_boxes(self) -> np.ndarray:
        """``(M, T, 4)`` boxes of every track (invisible frames hold placeholders)."""
        return np.stack([t.boxes for t in self.tracks]) if self.tracks else np.zeros((0, self.n_frames, 4))

    @cached_property
    def visibility(self) -> np.ndarray:
        return np.stack([t.visible for t in self.tracks]) if self.tracks else np.zeros((0, self.n_frames), bool)

    @cached_property
    def class_ids(self) -> np.ndarray:
        return np.array([t.class_id for t in self.tracks], dtype=np.int64)

    def gt(self, frame: int):
        """Visible GT at ``frame``: ``(boxes (M, 4), track indices (M,))``."""
        idx = np.flatnonzero(self.visibility[:, frame])
        return self.track_boxes[idx, frame], idx

    # oracle internals, derived from the projection seed only
    @cached_property
    def _oracle_tables(self):
        o = self.oracle
        rng = np.random.default_rng([o.projection_seed, 0x7B])
        d_reg = o.appearance_dim + 4
        d_cls = o.class_signal_dim + 2
        q_reg, _ = np.linalg.qr(rng.normal(size=(o.feature_dim, d_reg)))
        q_cls, _ = np.linalg.qr(rng.normal(size=(o.feature_dim, d_cls)))
        bg = rng.normal(size=o.appearance_dim)
        bg /= np.linalg.norm(bg)
        appearance = np.stack([_appearance_code(t.appearance_seed, o.appearance_dim) for t in self.tracks]) if self.tracks else np.zeros((0, o.appearance_dim))
        return np.ascontiguousarray(q_reg.T), np.ascontiguousarray(q_cls.T), bg, appearance


def _appearance_code(seed: int, dim: int) -> np.ndarray:
    v = np.random.default_rng([seed, 0xA11]).normal(size=dim)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# generation


def _clamp_center(x, y, w, h, width, height):
    return min(max(x, w / 2.0), width - w / 2.0), min(max(y, h / 2.0), height - h / 2.0)


def run_program(program: MotionProgram, box0, n_frames: int, width: float, height: float, min_size: float = 4.0) -> np.ndarray:
    """Roll a motion program forward from ``box0``; returns ``(n_frames, 4)``.

    Linear and random-walk motion reflect their velocity at the frame border;
    every box is clamped to lie inside the frame with sides >= ``min_size``.
    """
    p = program.params
    x0, y0, w0, h0 = (float(v) for v in box0)
    out = np.empty((n_frames, 4))
    out[0] = (x0, y0, w0, h0)
    x, y, w, h = x0, y0, w0, h0
    vx, vy = p.get("vx", 0.0), p.get("vy", 0.0)
    walk = p.get("walk", None)
    for t in range(1, n_frames):
        if program.kind == "sinusoidal":
            ph = p["phase"]
            arg = 2.0 * np.pi * t / p["period"] + ph
            x = x0 + vx * t + p["ax"] * (np.sin(arg) - np.sin(ph))
            y = y0 + vy * t + p["ay"] * (np.sin(arg) - np.sin(ph))
        else:
            if program.kind == "scale-change":
                w = w * p["rate"]
                h = h * p["rate"]
            elif program.kind == "piecewise-random-walk" and t % p["segment"] == 0:
                k = t // p["segment"] - 1
                vx += walk[k][0]
                vy += walk[k][1]
            x += vx
            y += vy
            if x < w / 2.0 or x > width - w / 2.0:
                vx = -vx
            if y < h / 2.0 or y > height - h / 2.0:
                vy = -vy
        w = min(max(w, min_size), width)
        h = min(max(h, min_size), height)
        x, y = _clamp_center(x, y, w, h, width, height)
        out[t] = (x, y, w, h)
    return out


def _sample_program(rng: np.random.Generator, cfg: WorldConfig) -> MotionProgram:
    kinds = [k for k, _ in cfg.motion_mix]
    probs = np.array([p for _, p in cfg.motion_mix])
    kind = kinds[rng.choice(len(kinds), p=probs / probs.sum())]
    speed = rng.uniform(*cfg.speed_range)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    params = {"vx": float(speed * np.cos(angle)), "vy": float(speed * np.sin(angle))}
    if kind == "sinusoidal":
        amp = rng.uniform(*cfg.amplitude_range)
        a2 = rng.uniform(0.0, 2.0 * np.pi)
        params.update(
            vx=params["vx"] * 0.25,
            vy=params["vy"] * 0.25,
            ax=float(amp * np.cos(a2)),
            ay=float(amp * np.sin(a2)),
            period=float(rng.uniform(*cfg.period_range)),
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        )
    elif kind == "scale-change":
        params["rate"] = float(rng.uniform(*cfg.scale_rate_range))
    elif kind == "piecewise-random-walk":
        n_seg = max(cfg.n_frames // cfg.walk_segment, 1)
        params["segment"] = int(cfg.walk_segment)
        params["walk"] = [[float(v) for v in rng.normal(0.0, cfg.walk_std, size=2)] for _ in range(n_seg)]
    return MotionProgram(kind, params)


def generate_video(config: WorldConfig, seed: int) -> SyntheticVideo:
    """Deterministically build one synthetic video from ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng([int(seed), 0x51D])
    n_tracks = int(rng.integers(config.min_tracks, config.max_tracks + 1))
    T = config.n_frames
    tracks = []
    centers: list[tuple[float, float]] = []
    for k in range(n_tracks):
        w = rng.uniform(*config.size_range)
        h = w * rng.uniform(*config.aspect_range)
        h = min(h, config.height)
        for _ in range(50):
            x = rng.uniform(w / 2.0, config.width - w / 2.0)
            y = rng.uniform(h / 2.0, config.height - h / 2.0)
            if all((x - cx) ** 2 + (y - cy) ** 2 >= config.min_separation**2 for cx, cy in centers):
                break
        centers.append((x, y))
        program = _sample_program(rng, config)
        boxes = run_program(program, (x, y, w, h), T, config.width, config.height, config.min_size)
        visible = np.ones(T, dtype=bool)
        if rng.uniform() < config.partial_visibility_prob:
            span = int(rng.integers(max(T // 3, 1), T + 1))
            start = int(rng.integers(0, T - span + 1))
            visible[:] = False
            visible[start : start + span] = True
        tracks.append(
            ObjectTrack(
                class_id=int(rng.integers(0, config.n_classes)),
                boxes=boxes,
                visible=visible,
                appearance_seed=int(rng.integers(0, 2**31 - 1)),
                phase_offset=int(rng.integers(0, config.oracle.phase_period)),
                motion=program,
            )
        )
    return SyntheticVideo(seed=int(seed), config=config, tracks=tracks)


def static_proposals(
    video: SyntheticVideo,
    frame: int,
    n_per_object: int = 5,
    n_background: int = 10,
    jitter_std: float = 0.1,
    seed: int | None = None,
) -> np.ndarray:
    """RPN-like proposals at ``frame`` as a ``(N, 4)`` center-form array.

    Jittered copies of every visible GT box (center jitter ``jitter_std * size``,
    log-normal size jitter) come first, object by object, followed by
    ``n_background`` uniformly placed boxes.
    """
    if not 0 <= frame < video.n_frames:
        raise IndexError(f"frame {frame} outside [0, {video.n_frames})")
    cfg = video.config
    rng = np.random.default_rng([video.seed if seed is None else int(seed), int(frame), 0x9809])
    gt, _ = video.gt(frame)
    out = []
    for g in gt:
        for _ in range(n_per_object):
            j = rng.normal(0.0, 1.0, size=4) * jitter_std
            w = max(g[2] * np.exp(j[2]), cfg.min_size)
            h = max(g[3] * np.exp(j[3]), cfg.min_size)
            out.append((g[0] + j[0] * g[2], g[1] + j[1] * g[3], w, h))
    for _ in range(n_background):
        w = rng.uniform(*cfg.size_range)
        h = min(w * rng.uniform(*cfg.aspect_range), cfg.height)
        out.append((rng.uniform(w / 2.0, cfg.width - w / 2.0), rng.uniform(h / 2.0, cfg.height - h / 2.0), w, h))
    return np.array(out, dtype=np.float64).reshape(-1, 4)


def proposal_recall(video: SyntheticVideo, frame: int, proposals: np.ndarray, threshold: float = 0.5) -> tuple[int, int]:
    """``(covered, total)`` visible GT boxes at ``frame`` with a proposal of IoU >= threshold."""
    gt, _ = video.gt(frame)
    if len(gt) == 0:
        return 0, 0
    if len(proposals) == 0:
        return 0, len(gt)
    ious = kernels.iou_matrix(gt, proposals)
    return int((ious.max(axis=1) >= threshold).sum()), len(gt)


# ---------------------------------------------------------------------------
# feature oracles


def _noise_keys(video: SyntheticVideo, boxes: np.ndarray, frame: int, stream: int) -> np.ndarray:
    q = np.round(boxes * 4.0).astype(np.int64)
    keys = np.empty((boxes.shape[0], 7), dtype=np.int64)
    keys[:, 0] = video.seed
    keys[:, 1] = stream
    keys[:, 2] = frame
    keys[:, 3:] = q
    return keys


def regression_code(video: SyntheticVideo, boxes: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Pre-projection regression code ``(N, A + 4)`` and the matched track (or -1)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    o = video.oracle
    _, _, bg, appearance = video._oracle_tables
    if video.tracks:
        idx = kernels.nearest_within(boxes[:, :2], video.track_boxes[:, frame, :2], video.visibility[:, frame], o.receptive_radius)
    else:
        idx = np.full(boxes.shape[0], -1, dtype=np.int64)
    code = np.zeros((boxes.shape[0], o.appearance_dim + 4))
    code[:, : o.appearance_dim] = bg
    hit = idx >= 0
    if hit.any():
        g = video.track_boxes[idx[hit], frame]
        code[hit, : o.appearance_dim] = appearance[idx[hit]]
        geom = encode_array(boxes[hit], g)
        if o.offset_reference == "object":
            geom[:, 0] = (g[:, 0] - boxes[hit, 0]) / g[:, 2]
            geom[:, 1] = (g[:, 1] - boxes[hit, 1]) / g[:, 3]
        code[hit, o.appearance_dim :] = o.geometry_gain * geom
    return code, idx


def pool_regression_batch(video: SyntheticVideo, boxes: np.ndarray, frame: int) -> np.ndarray:
    """Regression features ``(N, f)`` for ``boxes`` on ``frame``."""
    boxes = validate_boxes(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    if not 0 <= frame < video.n_frames:
        raise IndexError(f"frame {frame} outside [0, {video.n_frames})")
    proj_reg, _, _, _ = video._oracle_tables
    code, _ = regression_code(video, boxes, frame)
    feat = kernels.affine_rows(code, proj_reg, np.zeros(proj_reg.shape[1]))
    if video.oracle.noise_std > 0:
        feat += video.oracle.noise_std * kernels.hash_normal(_noise_keys(video, boxes, frame, _REG_STREAM), feat.shape[1])
    return feat


def pool_regression_features(video: SyntheticVideo, box, frame: int) -> np.ndarray:
    return pool_regression_batch(video, np.asarray(box, dtype=np.float64).reshape(1, 4), frame)[0]


def code_class(config: WorldConfig, class_id: int) -> int:
    """Class whose per-frame code ``class_id`` shares (itself unless ambiguous)."""
    if config.oracle.temporal_ambiguity:
        for a, b in config.oracle.ambiguous_pairs:
            if class_id == b:
                return a
    return class_id


def phase_pattern(config: WorldConfig, class_id: int) -> np.ndarray | None:
    """Per-period sign pattern of the phase channel, or None for unpatterned classes.

    The first class of a pair holds a square wave (half period +1, half -1),
    the second alternates every frame.
    """
    o = config.oracle
    if not o.temporal_ambiguity:
        return None
    P = o.phase_period
    for a, b in o.ambiguous_pairs:
        if class_id == a:
            return np.where(np.arange(P) < P // 2, 1.0, -1.0)
        if class_id == b:
            return np.where(np.arange(P) % 2 == 0, 1.0, -1.0)
    return None


def classification_code(video: SyntheticVideo, boxes: np.ndarray, frame: int) -> np.ndarray:
    o = video.oracle
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    code = np.zeros((boxes.shape[0], o.class_signal_dim + 2))
    code[:, -1] = 1.0
    gt, idx = video.gt(frame)
    if len(gt) == 0:
        return code
    ious = kernels.iou_matrix(boxes, gt)
    best = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(boxes.shape[0]), best]
    for r in np.flatnonzero(best_iou > 0):
        track = video.tracks[idx[best[r]]]
        v = best_iou[r]
        code[r, code_class(video.config, track.class_id)] = v
        pat = phase_pattern(video.config, track.class_id)
        if pat is not None:
            code[r, o.class_signal_dim] = v * pat[(frame + track.phase_offset) % o.phase_period]
        code[r, -1] = 1.0 - v
    return code


def pool_classification_batch(video: SyntheticVideo, boxes: np.ndarray, frame: int) -> np.ndarray:
    """Classification features ``(N, f)`` for ``boxes`` on ``frame``."""
    boxes = validate_boxes(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    if not 0 <= frame < video.n_frames:
        raise IndexError(f"frame {frame} outside [0, {video.n_frames})")
    _, proj_cls, _, _ = video._oracle_tables
    code = classification_code(video, boxes, frame)
    feat = kernels.affine_rows(code, proj_cls, np.zeros(proj_cls.shape[1]))
    if video.oracle.noise_std > 0:
        feat += video.oracle.noise_std * kernels.hash_normal(_noise_keys(video, boxes, frame, _CLS_STREAM), feat.shape[1])
    return feat


def pool_classification_features(video: SyntheticVideo, box, frame: int) -> np.ndarray:
    return pool_classification_batch(video, np.asarray(box, dtype=np.float64).reshape(1, 4), frame)[0]


# ---------------------------------------------------------------------------
# dataset container (JSON; floats are written with repr and round-trip exactly)


def video_to_dict(video: SyntheticVideo) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": video.seed,
        "config": video.config.to_dict(),
        "tracks": [
            {
                "class_id": t.class_id,
                "appearance_seed": t.appearance_seed,
                "phase_offset": t.phase_offset,
                "motion": t.motion.to_dict() if t.motion is not None else None,
                "boxes": t.boxes.tolist(),
                "visible": [int(v) for v in t.visible],
            }
            for t in video.tracks
        ],
        "proposals": {str(f): np.asarray(p).tolist() for f, p in sorted(video.proposals.items())},
    }


def video_from_dict(d: dict) -> SyntheticVideo:
    if d.get("format") != DATASET_FORMAT:
        raise ValueError(f"not a {DATASET_FORMAT} document")
    if d.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {d.get('version')}")
    config = WorldConfig.from_dict(d["config"])
    tracks = []
    for t in d["tracks"]:
        m = t.get("motion")
        tracks.append(
            ObjectTrack(
                class_id=int(t["class_id"]),
                boxes=np.array(t["boxes"], dtype=np.float64).reshape(-1, 4),
                visible=np.array(t["visible"], dtype=bool),
                appearance_seed=int(t["appearance_seed"]),
                phase_offset=int(t.get("phase_offset", 0)),
                motion=MotionProgram(m["kind"], m["params"]) if m else None,
            )
        )
    proposals = {int(f): np.array(p, dtype=np.float64).reshape(-1, 4) for f, p in d.get("proposals", {}).items()}
    return SyntheticVideo(seed=int(d["seed"]), config=config, tracks=tracks, proposals=proposals)


def save_video(video: SyntheticVideo, path) -> None:
    Path(path).write_text(json.dumps(video_to_dict(video), sort_keys=True) + "\n")


def load_video(path) -> SyntheticVideo:
    return video_from_dict(json.loads(Path(path).read_text()))
