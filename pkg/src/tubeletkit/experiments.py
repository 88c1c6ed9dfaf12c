"""End-to-end pipelines: TPN training, tubelet-quality and classification studies.

All randomness derives from the run seed, so a config plus a seed fixes every
number these functions return.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .classifier import MODES, classify_batch, label_tubelet_frames, train_classifier
from .config import ExperimentConfig
from .evaluation import Detections, GroundTruth, TubeletQualityReport, average_precision, tubelet_quality
from .synthworld import SyntheticVideo, generate_video, pool_classification_batch, static_proposals
from .tpn import (
    NormalizationStats,
    RegressionLayer,
    TpnConfig,
    TrainingSet,
    build_training_set,
    match_anchors,
    train_tpn,
)
from .tubelet import TubeletProposal, generate_all, ideal_tubelet

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "test": 1}
TABLE1_MODELS = (
    ("w2_random", 2, "random"),
    ("w5_random", 5, "random"),
    ("w5_block", 5, "block"),
    ("w11_block", 11, "block"),
    ("w20_block", 20, "block"),
)


def video_seed(run_seed: int, split: str, index: int) -> int:
    """32-bit video seed derived from the run seed, split and index."""
    ss = np.random.SeedSequence([int(run_seed) & 0xFFFFFFFF, int(run_seed) >> 32, SPLITS[split], int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


def make_videos(config: ExperimentConfig, seed: int | None = None) -> tuple[list[SyntheticVideo], list[SyntheticVideo]]:
    seed = config.seed if seed is None else seed
    train = [generate_video(config.world, video_seed(seed, "train", i)) for i in range(config.data.n_train_videos)]
    test = [generate_video(config.world, video_seed(seed, "test", i)) for i in range(config.data.n_test_videos)]
    return train, test


# ---------------------------------------------------------------------------
# TPN


def training_set(config: ExperimentConfig, videos: list[SyntheticVideo], window: int) -> TrainingSet:
    d = config.data
    return build_training_set(videos, window, d.anchor_stride, d.proposal_kw(), d.match_threshold)


def tpn_config(config: ExperimentConfig, window: int, init: str, seed: int) -> TpnConfig:
    t = config.tpn
    return TpnConfig(
        window=window,
        init=init,
        learning_rate=t.learning_rate,
        momentum=t.momentum,
        epochs=t.two_frame_epochs if window == 2 else t.multi_epochs,
        batch=t.batch,
        init_std=t.init_std,
        clip_norm=t.clip_norm,
        scale_lr_by_window=t.scale_lr_by_window,
        rebase_block_init=t.rebase_block_init,
        seed=seed,
    )


@dataclass
class TrainedTpn:
    layer: RegressionLayer
    stats: NormalizationStats
    epoch_loss: list


def fit_tpn(
    config: ExperimentConfig,
    videos: list[SyntheticVideo],
    window: int,
    init: str,
    seed: int,
    two_frame: TrainedTpn | None = None,
) -> TrainedTpn:
    """Train one regression layer; block init trains (or reuses) the 2-frame model first."""
    if init == "block" and window > 2 and two_frame is None:
        two_frame = fit_tpn(config, videos, 2, "random", seed)
    init_mode = "random" if window == 2 else init
    ts = training_set(config, videos, window)
    layer, stats, hist = train_tpn(
        ts,
        tpn_config(config, window, init_mode, seed),
        init_layer=two_frame.layer if init_mode == "block" else None,
        init_stats=two_frame.stats if init_mode == "block" else None,
    )
    for epoch, value in enumerate(hist.epoch_loss):
        log.info("stage=tpn window=%d init=%s epoch=%d metric=loss value=%r", window, init_mode, epoch, value)
    return TrainedTpn(layer, stats, hist.epoch_loss)


# ---------------------------------------------------------------------------
# tubelet quality


@dataclass
class PositiveAnchors:
    anchors: dict  # frame -> (n, 4)
    tracks: dict  # frame -> (n,) track index


def positive_anchors(config: ExperimentConfig, video: SyntheticVideo, length: int | None = None) -> PositiveAnchors:
    """Matched proposals whose track stays visible for a whole tubelet."""
    length = config.tubelet.length if length is None else length
    anchors, tracks = {}, {}
    for s in range(0, video.n_frames - length + 1, config.tubelet.anchor_stride):
        props = static_proposals(video, s, **config.data.proposal_kw())
        gt, tidx = video.gt(s)
        pairs = match_anchors(props, gt, config.data.match_threshold)
        keep = [(p, tidx[g]) for p, g in pairs if video.visibility[tidx[g], s : s + length].all()]
        if keep:
            anchors[s] = props[[p for p, _ in keep]]
            tracks[s] = np.array([t for _, t in keep], dtype=np.int64)
    return PositiveAnchors(anchors, tracks)


def predicted_and_ideal(config: ExperimentConfig, video: SyntheticVideo, layer, stats, length: int | None = None):
    length = config.tubelet.length if length is None else length
    pos = positive_anchors(config, video, length)
    tubelets = generate_all(video, pos.anchors, length, layer, stats)
    ideal = []
    for s in sorted(pos.anchors):
        for a, t in zip(pos.anchors[s], pos.tracks[s]):
            ideal.append(ideal_tubelet(a, video.track_boxes[t, s : s + length]))
    return tubelets, ideal


def quality_on(config: ExperimentConfig, videos: list[SyntheticVideo], layer, stats) -> TubeletQualityReport:
    pred, ideal = [], []
    for v in videos:
        p, i = predicted_and_ideal(config, v, layer, stats)
        pred += [t.boxes for t in p]
        ideal += i
    return tubelet_quality(pred, ideal)


def table1_seed(config: ExperimentConfig, seed: int) -> dict:
    """Tubelet quality of every window-ablation model for one seed."""
    train, test = make_videos(config, seed)
    two = fit_tpn(config, train, 2, "random", seed)
    rows = {}
    for name, window, init in TABLE1_MODELS:
        model = two if window == 2 else fit_tpn(config, train, window, init, seed, two_frame=two)
        rep = quality_on(config, test, model.layer, model.stats)
        rows[name] = {**rep.as_dict(), "final_loss": model.epoch_loss[-1]}
        log.info("stage=table1 seed=%d model=%s metric=mean_iou value=%r", seed, name, rep.mean_iou)
    return rows


def table1_checks(rows: dict) -> dict:
    iou = {k: v["mean_iou"] for k, v in rows.items()}
    return {
        "w5_block_gt_w5_random": iou["w5_block"] > iou["w5_random"],
        "w5_block_ge_w2": iou["w5_block"] >= iou["w2_random"],
        "w20_block_lt_w5_block": iou["w20_block"] < iou["w5_block"],
    }


def _map_seeds(fn, config: ExperimentConfig, seeds, jobs: int):
    seeds = [int(s) for s in seeds]
    if jobs <= 1 or len(seeds) == 1:
        return [fn(config, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
        return list(pool.map(fn, [config] * len(seeds), seeds))


def run_table1(config: ExperimentConfig, seeds=None, jobs: int = 1) -> dict:
    """Window-ablation study (`repro table1`); every ordering check must hold on each seed individually."""
    seeds = list(config.repro.seeds if seeds is None else seeds)
    per_seed = _map_seeds(table1_seed, config, seeds, jobs)
    result = {"seeds": {}, "checks": {}, "mean": {}}
    for s, rows in zip(seeds, per_seed):
        result["seeds"][str(s)] = rows
        for k, ok in table1_checks(rows).items():
            result["checks"][f"seed{s}.{k}"] = bool(ok)
    for name, _, _ in TABLE1_MODELS:
        result["mean"][name] = {
            m: float(np.mean([r[name][m] for r in per_seed])) for m in ("mad", "mrd", "mean_iou")
        }
    result["passed"] = all(result["checks"].values())
    return result


# ---------------------------------------------------------------------------
# classification


@dataclass
class ClassificationCorpus:
    features: np.ndarray  # (N, l, f)
    labels: np.ndarray  # (N, l)
    boxes: np.ndarray  # (N, l, 4)
    image: np.ndarray  # (N, l) frame keys
    video_index: np.ndarray  # (N,)


def tubelet_features(video: SyntheticVideo, tubelets: list[TubeletProposal]) -> np.ndarray:
    """Classification features ``(N, l, f)`` pooled along equal-length tubelets."""
    if not tubelets:
        return np.zeros((0, 0, video.oracle.feature_dim))
    length = tubelets[0].length
    out = np.empty((len(tubelets), length, video.oracle.feature_dim))
    by_frame: dict[int, list[int]] = {}
    for i, t in enumerate(tubelets):
        by_frame.setdefault(t.anchor_frame, []).append(i)
    for s, idx in by_frame.items():
        boxes = np.stack([tubelets[i].boxes for i in idx])
        for k in range(length):
            out[idx, k] = pool_classification_batch(video, boxes[:, k], s + k)
    return out


def classification_corpus(config: ExperimentConfig, videos: list[SyntheticVideo], layer, stats) -> ClassificationCorpus:
    c = config.classifier
    L = c.tubelet_length
    feats, labels, boxes, image, vids = [], [], [], [], []
    for vi, v in enumerate(videos):
        anchors = {
            s: static_proposals(v, s, n_per_object=c.n_per_object, n_background=c.n_background, jitter_std=config.data.jitter_std)
            for s in range(0, v.n_frames - L + 1, L)
        }
        tubs = generate_all(v, anchors, L, layer, stats)
        if not tubs:
            continue
        feats.append(tubelet_features(v, tubs))
        for t in tubs:
            labels.append(label_tubelet_frames(v, t.boxes, t.anchor_frame)[0])
            boxes.append(t.boxes)
            image.append(vi * v.n_frames + t.anchor_frame + np.arange(L))
            vids.append(vi)
    if not feats:
        raise ValueError("no tubelets in corpus")
    return ClassificationCorpus(
        np.concatenate(feats), np.array(labels), np.array(boxes), np.array(image), np.array(vids, dtype=np.int64)
    )


def frame_ground_truth(videos: list[SyntheticVideo], image_keys: np.ndarray) -> GroundTruth:
    im, cls, bx = [], [], []
    for key in np.unique(image_keys):
        v = videos[0]
        vi, fr = divmod(int(key), v.n_frames)
        gt, idx = videos[vi].gt(fr)
        for j in range(len(gt)):
            im.append(key)
            cls.append(videos[vi].tracks[idx[j]].class_id)
            bx.append(gt[j])
    return GroundTruth(np.array(im, dtype=np.int64), np.array(cls, dtype=np.int64), np.array(bx).reshape(-1, 4))


def scored_detections(probs: np.ndarray, corpus: ClassificationCorpus, n_classes: int) -> Detections:
    """Every tubelet box becomes one detection per object class."""
    n, l, _ = probs.shape
    return Detections(
        np.repeat(corpus.image.reshape(-1), n_classes),
        np.tile(np.arange(n_classes), n * l),
        np.repeat(corpus.boxes.reshape(-1, 4), n_classes, axis=0),
        probs.reshape(n * l, -1)[:, 1:].reshape(-1),
    )


def classification_metrics(config: ExperimentConfig, model, corpus: ClassificationCorpus, gt: GroundTruth) -> dict:
    C = config.world.n_classes
    probs = classify_batch(model, corpus.features)
    pred = probs.argmax(-1)
    y = corpus.labels
    report = average_precision(
        scored_detections(probs, corpus, C), gt, classes=range(C), iou_threshold=config.eval.iou_threshold, protocol=config.eval.protocol
    )
    out = {
        "accuracy": float((pred == y).mean()),
        "first_frame_accuracy": float((pred[:, 0] == y[:, 0]).mean()),
        "mean_ap": report.mean_ap,
    }
    o = config.world.oracle
    if o.temporal_ambiguity:
        pair = np.isin(y, [c + 1 for p in o.ambiguous_pairs for c in p])
        out["ambiguous_pair_accuracy"] = float((pred[pair] == y[pair]).mean()) if pair.any() else float("nan")
    return out


def table3_seed(config: ExperimentConfig, seed: int) -> dict:
    train, test = make_videos(config, seed)
    tpn = fit_tpn(config, train, config.tpn.window, config.tpn.init, seed)
    tr = classification_corpus(config, train, tpn.layer, tpn.stats)
    te = classification_corpus(config, test, tpn.layer, tpn.stats)
    gt = frame_ground_truth(test, te.image)
    rows = {}
    for mode in MODES:
        model, hist = train_classifier(tr.features, tr.labels, config.world.n_classes, config.classifier.trainer(seed, mode))
        for it in range(0, len(hist.iteration_loss), 50):
            log.info("stage=classifier seed=%d mode=%s iteration=%d metric=loss value=%r", seed, mode, it, hist.iteration_loss[it])
        rows[mode] = {**classification_metrics(config, model, te, gt), "final_loss": hist.iteration_loss[-1]}
        log.info("stage=table3 seed=%d mode=%s metric=accuracy value=%r", seed, mode, rows[mode]["accuracy"])
    return rows


def table3_checks(mean: dict) -> dict:
    ed, va, pf = mean["encoder_decoder"], mean["vanilla_lstm"], mean["per_frame_linear"]
    return {
        "accuracy_ed_ge_vanilla": ed["accuracy"] >= va["accuracy"],
        "accuracy_vanilla_ge_per_frame": va["accuracy"] >= pf["accuracy"],
        "mean_ap_ed_ge_vanilla": ed["mean_ap"] >= va["mean_ap"],
        "mean_ap_vanilla_ge_per_frame": va["mean_ap"] >= pf["mean_ap"],
        "first_frame_ed_ge_vanilla": ed["first_frame_accuracy"] >= va["first_frame_accuracy"],
    }


def run_table3(config: ExperimentConfig, seeds=None, jobs: int = 1) -> dict:
    """Classifier-mode study (`repro table3`); ordering checks apply to the means over seeds."""
    seeds = list(config.repro.seeds if seeds is None else seeds)
    per_seed = _map_seeds(table3_seed, config, seeds, jobs)
    result = {"seeds": {str(s): rows for s, rows in zip(seeds, per_seed)}, "mean": {}}
    for mode in MODES:
        keys = per_seed[0][mode].keys()
        result["mean"][mode] = {k: float(np.mean([r[mode][k] for r in per_seed])) for k in keys}
    result["checks"] = {k: bool(v) for k, v in table3_checks(result["mean"]).items()}
    result["passed"] = all(result["checks"].values())
    return result


def seeded(config: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return config if seed is None else replace(config, seed=seed)


# ---------------------------------------------------------------------------
# gradient checks


def gradient_suite(seed: int = 0, epsilon: float = 1e-4, steps: int = 6, hidden: int = 8) -> dict:
    """Max relative gradient errors for each differentiable building block."""
    from .classifier import TemporalClassifier, classifier_loss
    from .nncore import (
        DenseLayer,
        LstmCell,
        dense_backward,
        dense_forward,
        grad_check,
        lstm_sequence,
        lstm_sequence_backward,
        smoothed_l1_loss,
        softmax_cross_entropy,
    )

    rng = np.random.default_rng(seed)
    f, B, C = 5, 3, 4
    out = {}

    layer = DenseLayer.init(f, 4, 0.5, rng)
    x = rng.normal(size=(B, f))
    probe = rng.normal(size=(B, 4))

    def dense_loss(p):
        y = dense_forward(layer, x)
        _, gw, gb = dense_backward(layer, x, probe)
        return float(np.sum(y * probe)), {"d.w": gw, "d.b": gb}

    out["dense"] = grad_check(dense_loss, layer.params("d"), epsilon)

    cell = LstmCell.init(f, hidden, 0.5, rng)
    cell.b[:] = rng.normal(0.0, 0.5, size=cell.b.shape)
    xs = rng.normal(size=(steps, B, f))
    probe_h = rng.normal(size=(steps, B, hidden))

    def lstm_loss(p):
        hs, final, cache = lstm_sequence(cell, xs)
        g, _, _ = lstm_sequence_backward(cell, cache, probe_h)
        return float(np.sum(hs * probe_h)), {f"l.{k}": v for k, v in g.items()}

    out["lstm"] = grad_check(lstm_loss, cell.params("l"), epsilon)

    feats = rng.normal(size=(B, steps, f))
    labels = rng.integers(0, C + 1, size=(B, steps))
    model = TemporalClassifier.init("encoder_decoder", f, C, hidden, 0.5, rng)
    out["encoder_decoder"] = grad_check(lambda p: classifier_loss(model, feats, labels), model.params(), epsilon)

    pred = {"p": rng.normal(0.0, 1.5, size=(B, 4))}
    target = rng.normal(0.0, 1.5, size=(B, 4))
    pred["p"][np.abs(np.abs(pred["p"] - target) - 1.0) < 0.05] += 0.2  # stay off the kink

    def sl1(p):
        loss, g = smoothed_l1_loss(p["p"], target)
        return loss, {"p": g}

    out["smoothed_l1"] = grad_check(sl1, pred, epsilon)

    logits = {"z": rng.normal(size=(B * 2, C + 1))}
    lab = rng.integers(0, C + 1, size=B * 2)

    def xent(p):
        loss, g = softmax_cross_entropy(p["z"], lab)
        return loss, {"z": g}

    out["cross_entropy"] = grad_check(xent, logits, epsilon)
    return out
