"""Versioned experiment configuration stored as JSON.

Every section is a flat dataclass; loading rejects unknown keys and schema
versions other than :data:`SCHEMA_VERSION`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .classifier import MODES, ClassifierConfig
from .evaluation import PROTOCOLS
from .synthworld import ConfigError, FeatureOracleParams, WorldConfig

SCHEMA_VERSION = 1
PRESETS = ("default", "table3", "realizable")


@dataclass(frozen=True)
class DataConfig:
    n_train_videos: int = 12
    n_test_videos: int = 6
    anchor_stride: int = 2
    n_per_object: int = 5
    n_background: int = 10
    jitter_std: float = 0.1
    match_threshold: float = 0.5

    def proposal_kw(self) -> dict:
        return {"n_per_object": self.n_per_object, "n_background": self.n_background, "jitter_std": self.jitter_std}


@dataclass(frozen=True)
class TpnStageConfig:
    window: int = 5
    init: str = "block"
    two_frame_epochs: int = 20
    multi_epochs: int = 3
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch: int = 64
    init_std: float = 0.01
    clip_norm: float | None = None
    scale_lr_by_window: bool = False
    rebase_block_init: bool = True


@dataclass(frozen=True)
class TubeletConfig:
    length: int = 20
    anchor_stride: int = 20


@dataclass(frozen=True)
class ClassifierStageConfig:
    """Classifier hyperparameters plus the tubelet corpus it trains on."""

    mode: str = "encoder_decoder"
    hidden: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    init_std: float = 0.0002
    batch: int = 32
    iterations: int = 600
    decay_every: int = 200
    decay_factor: float = 0.5
    clip_norm: float | None = None
    box_loss_weight: float = 0.0
    tubelet_length: int = 10
    n_per_object: int = 1
    n_background: int = 4

    def trainer(self, seed: int, mode: str | None = None) -> ClassifierConfig:
        keep = {f.name for f in fields(ClassifierConfig)}
        d = {k: v for k, v in asdict(self).items() if k in keep}
        d.update(seed=seed, mode=mode or self.mode)
        return ClassifierConfig(**d)


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    protocol: str = "all_points"


@dataclass(frozen=True)
class ReproConfig:
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tpn: TpnStageConfig = field(default_factory=TpnStageConfig)
    tubelet: TubeletConfig = field(default_factory=TubeletConfig)
    classifier: ClassifierStageConfig = field(default_factory=ClassifierStageConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    repro: ReproConfig = field(default_factory=ReproConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        d = self.data
        if d.n_train_videos < 1 or d.n_test_videos < 1:
            raise ConfigError("need at least one train and one test video")
        if d.anchor_stride < 1 or d.n_per_object < 0 or d.n_background < 0 or d.jitter_std < 0:
            raise ConfigError("invalid proposal settings")
        t = self.tpn
        if t.window < 2:
            raise ConfigError("tpn.window must be >= 2")
        if t.init not in ("random", "block"):
            raise ConfigError("tpn.init must be 'random' or 'block'")
        if min(t.two_frame_epochs, t.multi_epochs, t.batch) < 1 or t.learning_rate <= 0:
            raise ConfigError("tpn epochs, batch and learning_rate must be positive")
        if not 0 <= t.momentum < 1:
            raise ConfigError("tpn.momentum must lie in [0, 1)")
        if self.tubelet.length < 2 or self.tubelet.anchor_stride < 1:
            raise ConfigError("tubelet.length must be >= 2 and anchor_stride >= 1")
        if self.tubelet.length > self.world.n_frames:
            raise ConfigError("tubelet.length exceeds the video length")
        c = self.classifier
        if c.mode not in MODES:
            raise ConfigError(f"classifier.mode must be one of {MODES}")
        if min(c.hidden, c.batch, c.iterations, c.decay_every, c.tubelet_length) < 1 or c.learning_rate <= 0:
            raise ConfigError("classifier sizes and learning_rate must be positive")
        if c.tubelet_length > self.world.n_frames:
            raise ConfigError("classifier.tubelet_length exceeds the video length")
        if self.eval.protocol not in PROTOCOLS:
            raise ConfigError(f"eval.protocol must be one of {PROTOCOLS}")
        if not 0 < self.eval.iou_threshold <= 1:
            raise ConfigError("eval.iou_threshold must lie in (0, 1]")
        if not self.repro.seeds:
            raise ConfigError("repro.seeds must not be empty")

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "seed": self.seed, "world": self.world.to_dict()}
        for name in ("data", "tpn", "tubelet", "classifier", "eval", "repro"):
            out[name] = asdict(getattr(self, name))
        out["repro"]["seeds"] = list(self.repro.seeds)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
        sections = {
            "data": DataConfig,
            "tpn": TpnStageConfig,
            "tubelet": TubeletConfig,
            "classifier": ClassifierStageConfig,
            "eval": EvalConfig,
            "repro": ReproConfig,
        }
        unknown = set(d) - set(sections) - {"seed", "world"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "seed" in d:
            kw["seed"] = _as_int(d["seed"], "seed")
        if "world" in d:
            kw["world"] = WorldConfig.from_dict(d["world"])
        for name, klass in sections.items():
            if name in d:
                kw[name] = _section(klass, d[name], name)
        return cls(**kw)


def _as_int(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer")
    return v


def _section(klass, values, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(klass)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = {}
    for k, v in values.items():
        default = getattr(klass(), k)
        if isinstance(default, tuple):
            v = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name}.{k} must be a boolean")
        elif isinstance(default, int):
            v = _as_int(v, f"{name}.{k}")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{k} must be a number")
            v = float(v)
        kw[k] = v
    try:
        return klass(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def preset(name: str) -> ExperimentConfig:
    """Built-in configurations.

    ``default`` is the tubelet-quality corpus; ``table3`` adds an ambiguous class
    pair and a classifier schedule that escapes the small-init plateau;
    ``realizable`` is a noiseless single-object world with constant-size
    motions, where a 2-frame layer can fit the targets exactly.
    """
    if name == "default":
        return ExperimentConfig()
    if name == "table3":
        return ExperimentConfig(
            world=WorldConfig(oracle=FeatureOracleParams(temporal_ambiguity=True)),
            tpn=TpnStageConfig(window=2, init="random"),
            classifier=ClassifierStageConfig(
                hidden=32, learning_rate=0.5, init_std=0.3, iterations=2000, decay_every=700
            ),
        )
    if name == "realizable":
        world = WorldConfig(
            min_tracks=1,
            max_tracks=1,
            motion_mix=(("linear", 0.4), ("sinusoidal", 0.3), ("piecewise-random-walk", 0.3)),
            oracle=FeatureOracleParams(noise_std=0.0),
        )
        return ExperimentConfig(
            world=world,
            data=DataConfig(n_train_videos=30, anchor_stride=1),
            tpn=TpnStageConfig(window=2, init="random", two_frame_epochs=100),
        )
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(config, seed=seed)
