"""Per-frame tubelet classification with optional temporal context.

Three modes share one interface:

``per_frame_linear``
    a linear softmax classifier applied to every frame independently.
``vanilla_lstm``
    one LSTM run forward from a zero state; the class head reads each hidden state.
``encoder_decoder``
    an encoder LSTM runs forward over the tubelet, its final ``(c, h)`` seeds a
    decoder that runs over the reversed features, and the decoder outputs are
    flipped back so output ``t`` belongs to input frame ``t``.

Labels are ``0`` for background and ``class_id + 1`` for objects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import encode_array
from .nncore import (
    DenseLayer,
    LstmCell,
    NonFiniteError,
    SgdMomentum,
    dense_backward,
    dense_forward,
    load_checkpoint,
    lstm_sequence,
    lstm_sequence_backward,
    save_checkpoint,
    smoothed_l1_loss,
    softmax,
    softmax_cross_entropy,
)
from .synthworld import SyntheticVideo
from . import kernels

log = logging.getLogger(__name__)

MODES = ("per_frame_linear", "vanilla_lstm", "encoder_decoder")
LABEL_IOU = 0.5


@dataclass
class TemporalClassifier:
    mode: str
    class_head: DenseLayer
    encoder: LstmCell | None = None
    decoder: LstmCell | None = None
    box_head: DenseLayer | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown classifier mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "per_frame_linear":
            if self.encoder is not None or self.decoder is not None:
                raise ValueError("per_frame_linear takes no LSTM cells")
            head_in = self.class_head.in_dim
        else:
            if self.encoder is None:
                raise ValueError(f"{self.mode} needs an encoder cell")
            if (self.mode == "encoder_decoder") != (self.decoder is not None):
                raise ValueError("a decoder cell is used by encoder_decoder only")
            if self.decoder is not None and (
                self.decoder.hidden != self.encoder.hidden or self.decoder.input_dim != self.encoder.input_dim
            ):
                raise ValueError("encoder and decoder dimensions differ")
            head_in = self.encoder.hidden
            if self.class_head.in_dim != head_in:
                raise ValueError(f"class head expects {self.class_head.in_dim} inputs, LSTM emits {head_in}")
        if self.box_head is not None and (self.box_head.in_dim != head_in or self.box_head.out_dim != 4):
            raise ValueError("box head must map the head input to 4 outputs")

    @classmethod
    def init(
        cls,
        mode: str,
        feature_dim: int,
        n_classes: int,
        hidden: int = 64,
        std: float = 0.0002,
        rng: np.random.Generator | None = None,
        box_head: bool = False,
    ) -> TemporalClassifier:
        """Gaussian-initialized model with ``n_classes + 1`` outputs (background first)."""
        if mode not in MODES:
            raise ValueError(f"unknown classifier mode {mode!r}; expected one of {MODES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        enc = dec = None
        head_in = feature_dim
        if mode != "per_frame_linear":
            enc = LstmCell.init(feature_dim, hidden, std, rng)
            head_in = hidden
            if mode == "encoder_decoder":
                dec = LstmCell.init(feature_dim, hidden, std, rng)
        head = DenseLayer.init(head_in, n_classes + 1, std, rng)
        box = DenseLayer.init(head_in, 4, std, rng) if box_head else None
        return cls(mode, head, enc, dec, box)

    @property
    def feature_dim(self) -> int:
        return self.class_head.in_dim if self.encoder is None else self.encoder.input_dim

    @property
    def n_outputs(self) -> int:
        return self.class_head.out_dim

    @property
    def hidden(self) -> int:
        return 0 if self.encoder is None else self.encoder.hidden

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by name (updates write through)."""
        p = self.class_head.params("cls")
        if self.encoder is not None:
            p.update(self.encoder.params("enc"))
        if self.decoder is not None:
            p.update(self.decoder.params("dec"))
        if self.box_head is not None:
            p.update(self.box_head.params("box"))
        return p


# ---------------------------------------------------------------------------
# forward / backward on (T, B, f) stacks


def _forward(model: TemporalClassifier, xs: np.ndarray):
    T, B, f = xs.shape
    if f != model.feature_dim:
        raise ValueError(f"expected feature dim {model.feature_dim}, got {f}")
    cache: dict = {}
    if model.mode == "per_frame_linear":
        z = xs
    elif model.mode == "vanilla_lstm":
        z, _, cache["enc"] = lstm_sequence(model.encoder, xs)
    else:
        _, final, cache["enc"] = lstm_sequence(model.encoder, xs)
        hd, _, cache["dec"] = lstm_sequence(model.decoder, xs[::-1], final)
        z = hd[::-1]
    flat = z.reshape(T * B, -1)
    cache["z"] = flat
    logits = dense_forward(model.class_head, flat).reshape(T, B, -1)
    boxes = None
    if model.box_head is not None:
        boxes = dense_forward(model.box_head, flat).reshape(T, B, 4)
    return logits, boxes, cache


def _backward(model: TemporalClassifier, xs: np.ndarray, cache: dict, d_logits: np.ndarray, d_boxes=None):
    T, B, _ = xs.shape
    flat = cache["z"]
    dz, gw, gb = dense_backward(model.class_head, flat, d_logits.reshape(T * B, -1))
    grads = {"cls.w": gw, "cls.b": gb}
    if model.box_head is not None:
        if d_boxes is None:
            d_boxes = np.zeros((T, B, 4))
        dzb, gw, gb = dense_backward(model.box_head, flat, d_boxes.reshape(T * B, 4))
        dz = dz + dzb
        grads.update({"box.w": gw, "box.b": gb})
    if model.mode == "per_frame_linear":
        return grads
    dz = dz.reshape(T, B, -1)
    if model.mode == "vanilla_lstm":
        g, _, _ = lstm_sequence_backward(model.encoder, cache["enc"], dz)
    else:
        gd, _, d_init = lstm_sequence_backward(model.decoder, cache["dec"], dz[::-1])
        grads.update({f"dec.{k}": v for k, v in gd.items()})
        g, _, _ = lstm_sequence_backward(model.encoder, cache["enc"], np.zeros_like(dz), d_init)
    grads.update({f"enc.{k}": v for k, v in g.items()})
    return grads


def _as_stack(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"expected tubelet features (N, l, f) with l >= 1, got shape {x.shape}")
    return np.ascontiguousarray(x.transpose(1, 0, 2))


def classify_batch(model: TemporalClassifier, features: np.ndarray) -> np.ndarray:
    """Class distributions ``(N, l, C + 1)`` for ``N`` tubelets of equal length."""
    logits, _, _ = _forward(model, _as_stack(features))
    return softmax(logits).transpose(1, 0, 2)


def classify_tubelet(model: TemporalClassifier, features: np.ndarray) -> np.ndarray:
    """Class distributions ``(l, C + 1)`` for one tubelet's features ``(l, f)``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (l, f) features, got shape {x.shape}")
    return classify_batch(model, x[None])[0]


def predict_box_deltas(model: TemporalClassifier, features: np.ndarray) -> np.ndarray:
    if model.box_head is None:
        raise ValueError("model has no box head")
    _, boxes, _ = _forward(model, _as_stack(features))
    return boxes.transpose(1, 0, 2)


def classifier_loss(
    model: TemporalClassifier,
    features: np.ndarray,
    labels: np.ndarray,
    box_targets: np.ndarray | None = None,
    box_mask: np.ndarray | None = None,
    box_weight: float = 0.0,
):
    """Mean per-frame cross-entropy (plus weighted box loss) and gradients.

    ``features`` is ``(N, l, f)``, ``labels`` ``(N, l)``. The box term is the
    smoothed-L1 over frames where ``box_mask`` is set, averaged over all frames.
    """
    xs = _as_stack(features)
    T, B, _ = xs.shape
    y = np.asarray(labels, dtype=np.int64).T.reshape(-1)
    logits, boxes, cache = _forward(model, xs)
    loss, d_logits = softmax_cross_entropy(logits.reshape(T * B, -1), y)
    d_boxes = None
    if box_weight and model.box_head is not None and box_targets is not None:
        mask = np.asarray(box_mask, dtype=bool).T.reshape(-1, 1)
        tgt = np.asarray(box_targets, dtype=np.float64).transpose(1, 0, 2).reshape(-1, 4)
        pred = boxes.reshape(-1, 4)
        bl, bg = smoothed_l1_loss(np.where(mask, pred, 0.0), np.where(mask, tgt, 0.0))
        loss += box_weight * bl
        d_boxes = (box_weight * bg * mask).reshape(T, B, 4)
    grads = _backward(model, xs, cache, d_logits.reshape(T, B, -1), d_boxes)
    return loss, grads


# ---------------------------------------------------------------------------
# labels


def label_tubelet_frames(video: SyntheticVideo, boxes: np.ndarray, start_frame: int, threshold: float = LABEL_IOU):
    """Per-frame labels and matched GT boxes for a tubelet.

    A frame gets ``class_id + 1`` of its argmax-IoU visible object when that IoU
    exceeds ``threshold``, else ``0``. Returns ``(labels (l,), gt_boxes (l, 4))``
    where unmatched frames repeat the tubelet box.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(boxes), dtype=np.int64)
    matched = boxes.copy()
    for k, b in enumerate(boxes):
        gt, idx = video.gt(start_frame + k)
        if len(gt) == 0:
            continue
        ious = kernels.iou_matrix(b[None], gt)[0]
        j = int(np.argmax(ious))
        if ious[j] > threshold:
            labels[k] = video.tracks[idx[j]].class_id + 1
            matched[k] = gt[j]
    return labels, matched


def box_regression_targets(tubelet_boxes: np.ndarray, matched: np.ndarray, labels: np.ndarray):
    """Movement-style deltas of the matched GT w.r.t. each tubelet box, and the foreground mask."""
    return encode_array(tubelet_boxes, matched), np.asarray(labels) > 0


# ---------------------------------------------------------------------------
# training


@dataclass
class ClassifierConfig:
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
    seed: int = 0


@dataclass
class ClassifierLog:
    iteration_loss: list = field(default_factory=list)


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    config: ClassifierConfig,
    box_targets: np.ndarray | None = None,
    box_mask: np.ndarray | None = None,
) -> tuple[TemporalClassifier, ClassifierLog]:
    """Minibatch SGD with momentum and step decay on a fixed-length tubelet corpus."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or len(x) == 0:
        raise ValueError("training corpus must be a non-empty (N, l, f) array")
    if y.shape != x.shape[:2]:
        raise ValueError(f"labels shape {y.shape} does not match features {x.shape[:2]}")
    if y.min() < 0 or y.max() > n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}]")
    rng = np.random.default_rng([config.seed, 0xC1A5])
    use_box = config.box_loss_weight > 0
    if use_box and box_targets is None:
        raise ValueError("box_loss_weight > 0 needs box targets")
    model = TemporalClassifier.init(config.mode, x.shape[2], n_classes, config.hidden, config.init_std, rng, box_head=use_box)
    params = model.params()
    opt = SgdMomentum(config.learning_rate, config.momentum, config.clip_norm)
    history = ClassifierLog()
    n = len(x)
    order = rng.permutation(n)
    pos = 0
    for it in range(config.iterations):
        if pos + config.batch > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + config.batch]
        pos += config.batch
        opt.learning_rate = config.learning_rate * config.decay_factor ** (it // config.decay_every)
        bt = box_targets[idx] if use_box else None
        bm = box_mask[idx] if use_box else None
        loss, grads = classifier_loss(model, x[idx], y[idx], bt, bm, config.box_loss_weight)
        if not np.isfinite(loss):
            raise NonFiniteError(f"classifier loss diverged at iteration {it} (mode={config.mode})")
        opt.step(params, grads)
        history.iteration_loss.append(loss)
        log.debug("stage=classifier mode=%s iteration=%d metric=loss value=%.10g", config.mode, it, loss)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def save_classifier(path, model: TemporalClassifier, meta: dict | None = None) -> None:
    info = {
        "kind": "classifier",
        "mode": model.mode,
        "hidden": model.hidden,
        "feature_dim": model.feature_dim,
        "n_outputs": model.n_outputs,
        "box_head": model.box_head is not None,
        **(meta or {}),
    }
    save_checkpoint(path, model.params(), info)


def load_classifier(path) -> tuple[TemporalClassifier, dict]:
    t, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path}: not a classifier checkpoint")

    def cell(prefix):
        return LstmCell(t[f"{prefix}.wx"], t[f"{prefix}.wh"], t[f"{prefix}.b"]) if f"{prefix}.wx" in t else None

    box = DenseLayer(t["box.w"], t["box.b"]) if meta.get("box_head") else None
    model = TemporalClassifier(meta["mode"], DenseLayer(t["cls.w"], t["cls.b"]), cell("enc"), cell("dec"), box)
    return model, meta
