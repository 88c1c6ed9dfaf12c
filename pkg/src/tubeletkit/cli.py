"""Command-line entry point: ``tubeletkit <subcommand> [options]``.

Exit codes: 0 success, 1 unexpected error, 2 usage error, 3 missing input,
4 invalid configuration, 5 a declared check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .classifier import MODES, classify_batch, load_classifier, save_classifier, train_classifier
from .config import PRESETS, ExperimentConfig, load_config, preset, save_config
from .evaluation import (
    GroundTruth,
    average_precision,
    corloc,
    format_report,
    format_table,
    tubelet_quality,
)
from .synthworld import ConfigError, load_video, save_video
from .tpn import load_tpn, match_anchors, save_tpn
from .tubelet import ideal_tubelet, read_tubelets, write_tubelets

EXIT_OK = 0
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_CHECK = 5
GRAD_TOLERANCE = 1e-4

log = logging.getLogger("tubeletkit")


class MissingInput(Exception):
    pass


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config(args, default_preset: str = "default") -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingInput(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = preset(args.preset or default_preset)
    return ex.seeded(cfg, args.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _videos(data_dir: Path, split: str):
    d = _require(data_dir / split, f"{split} split")
    files = sorted(d.glob("video_*.json"))
    if not files:
        raise MissingInput(f"no videos in {d}")
    return [load_video(p) for p in files], files


def _data_config(data_dir: Path, args) -> ExperimentConfig:
    """A stage reads the config stored with the dataset unless one is given."""
    if args.config or args.preset:
        return _config(args)
    return ex.seeded(load_config(_require(data_dir / "config.json", "dataset config")), args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    train, test = ex.make_videos(cfg)
    for split, videos in (("train", train), ("test", test)):
        (out / split).mkdir(exist_ok=True)
        for i, v in enumerate(videos):
            save_video(v, out / split / f"video_{i:03d}.json")
    save_config(cfg, out / "config.json")
    log.info("stage=gen-data metric=videos value=%d", len(train) + len(test))
    return EXIT_OK


def cmd_train_tpn(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    out = _out(args)
    train, _ = _videos(data, "train")
    two = ex.fit_tpn(cfg, train, 2, "random", cfg.seed)
    save_tpn(out / "tpn_w2.npz", two.layer, two.stats, {"init": "random", "seed": cfg.seed})
    model = two
    if cfg.tpn.window > 2:
        model = ex.fit_tpn(cfg, train, cfg.tpn.window, cfg.tpn.init, cfg.seed, two_frame=two)
    save_tpn(out / "tpn.npz", model.layer, model.stats, {"init": cfg.tpn.init, "seed": cfg.seed})
    _write_json(out / "tpn_loss.json", {"w2": two.epoch_loss, f"w{cfg.tpn.window}": model.epoch_loss})
    return EXIT_OK


def cmd_gen_tubelets(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    out = _out(args)
    videos, files = _videos(data, args.split)
    layer, stats, _ = load_tpn(_require(Path(args.tpn), "TPN checkpoint")) if args.tpn else (None, None, None)
    if layer is None and not args.ideal:
        raise MissingInput("gen-tubelets needs --tpn unless --ideal is given")
    model = None
    if args.classifier:
        model, _ = load_classifier(_require(Path(args.classifier), "classifier checkpoint"))
    for v, path in zip(videos, files):
        if model is not None:
            corpus_cfg = cfg
            if layer is None:
                raise MissingInput("scoring tubelets needs --tpn")
            tubs = ex.generate_all(
                v,
                {
                    s: ex.static_proposals(
                        v, s, n_per_object=cfg.classifier.n_per_object, n_background=cfg.classifier.n_background, jitter_std=cfg.data.jitter_std
                    )
                    for s in range(0, v.n_frames - corpus_cfg.classifier.tubelet_length + 1, corpus_cfg.classifier.tubelet_length)
                },
                corpus_cfg.classifier.tubelet_length,
                layer,
                stats,
            )
            if tubs:
                probs = classify_batch(model, ex.tubelet_features(v, tubs))
                for t, p in zip(tubs, probs):
                    t.scores = p
        elif args.ideal:
            pos = ex.positive_anchors(cfg, v)
            tubs = []
            for s in sorted(pos.anchors):
                for a, t in zip(pos.anchors[s], pos.tracks[s]):
                    boxes = ideal_tubelet(a, v.track_boxes[t, s : s + cfg.tubelet.length])
                    tubs.append(ex.TubeletProposal(s, boxes, a.copy()))
        else:
            tubs, _ = ex.predicted_and_ideal(cfg, v, layer, stats)
        write_tubelets(out / (path.stem + ".tubelets.tsv"), tubs)
    return EXIT_OK


def cmd_train_lstm(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    out = _out(args)
    train, _ = _videos(data, "train")
    layer, stats, _ = load_tpn(_require(Path(args.tpn), "TPN checkpoint"))
    corpus = ex.classification_corpus(cfg, train, layer, stats)
    mode = args.mode or cfg.classifier.mode
    model, hist = train_classifier(corpus.features, corpus.labels, cfg.world.n_classes, cfg.classifier.trainer(cfg.seed, mode))
    for it, value in enumerate(hist.iteration_loss):
        log.debug("stage=train-lstm mode=%s iteration=%d metric=loss value=%r", mode, it, value)
    save_classifier(out / "classifier.npz", model, {"seed": cfg.seed, "n_classes": cfg.world.n_classes})
    _write_json(out / "classifier_loss.json", {mode: hist.iteration_loss})
    return EXIT_OK


def _evaluate_quality(cfg, videos, tub_sets) -> dict:
    pred, ideal, skipped = [], [], 0
    for v, tubs in zip(videos, tub_sets):
        for t in tubs:
            gt, tidx = v.gt(t.anchor_frame)
            pairs = match_anchors(t.boxes[:1], gt, cfg.data.match_threshold)
            span = slice(t.anchor_frame, t.anchor_frame + t.length)
            if not pairs or not v.visibility[tidx[pairs[0][1]], span].all():
                skipped += 1
                continue
            track = tidx[pairs[0][1]]
            pred.append(t.boxes)
            ideal.append(ideal_tubelet(t.boxes[0], v.track_boxes[track, span]))
    if not pred:
        raise CheckFailed("no tubelet starts on a positive anchor")
    return {**tubelet_quality(pred, ideal).as_dict(), "skipped": skipped}


def _evaluate_scores(cfg, videos, tub_sets) -> dict:
    C = cfg.world.n_classes
    n_frames = videos[0].n_frames
    img, cls, boxes, scores, keys = [], [], [], [], set()
    for vi, tubs in enumerate(tub_sets):
        for t in tubs:
            for k in range(t.length):
                key = vi * n_frames + t.anchor_frame + k
                keys.add(key)
                img.append(key)
                boxes.append(t.boxes[k])
                scores.append(t.scores[k])
    img = np.array(img, dtype=np.int64)
    boxes = np.array(boxes).reshape(-1, 4)
    scores = np.array(scores).reshape(len(img), -1)
    gt = ex.frame_ground_truth(videos, np.array(sorted(keys), dtype=np.int64))
    dets = ex.Detections(np.repeat(img, C), np.tile(np.arange(C), len(img)), np.repeat(boxes, C, axis=0), scores[:, 1:].reshape(-1))
    rep = average_precision(dets, gt, classes=range(C), iou_threshold=cfg.eval.iou_threshold, protocol=cfg.eval.protocol)
    per_class, mean_corloc = corloc(img, boxes, scores[:, 1:], gt, classes=range(C), iou_threshold=cfg.eval.iou_threshold)
    out = {"mean_ap": rep.mean_ap, "corloc": mean_corloc}
    out.update({f"ap_class{c}": v for c, v in sorted(rep.ap.items())})
    out.update({f"corloc_class{c}": v for c, v in sorted(per_class.items())})
    return out


def cmd_evaluate(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    out = _out(args)
    videos, files = _videos(data, args.split)
    tdir = _require(Path(args.tubelets), "tubelet directory")
    tub_sets = [read_tubelets(_require(tdir / (p.stem + ".tubelets.tsv"), "tubelet file")) for p in files]
    scored = any(t.scores is not None for ts in tub_sets for t in ts)
    metrics = _evaluate_scores(cfg, videos, tub_sets) if scored else _evaluate_quality(cfg, videos, tub_sets)
    _write_json(out / "metrics.json", metrics)
    sys.stdout.write(format_report(metrics))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    errors = ex.gradient_suite(seed)
    ok = all(e < GRAD_TOLERANCE for e in errors.values())
    report = {f"max_rel_error.{k}": v for k, v in errors.items()}
    report["passed"] = ok
    sys.stdout.write(format_report(report))
    if args.out:
        _write_json(_out(args) / "grad_check.json", report)
    if not ok:
        raise CheckFailed(f"gradient check above {GRAD_TOLERANCE}")
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = _config(args, "default" if args.table == "table1" else "table3")
    seeds = list(cfg.repro.seeds)
    if args.seed is not None:
        seeds = [args.seed + i for i in range(len(seeds))]
    if args.table == "table1":
        result = ex.run_table1(cfg, seeds, args.jobs)
        rows = [{"model": k, **v} for k, v in result["mean"].items()]
        table = format_table(rows, ["model", "mad", "mrd", "mean_iou"])
    else:
        result = ex.run_table3(cfg, seeds, args.jobs)
        rows = [{"mode": k, **v} for k, v in result["mean"].items()]
        table = format_table(rows, ["mode", "accuracy", "first_frame_accuracy", "mean_ap"])
    checks = "".join(f"check {k}: {'ok' if v else 'FAILED'}\n" for k, v in result["checks"].items())
    if args.out:
        out = _out(args)
        _write_json(out / "metrics.json", result)
        (out / "table.txt").write_text(table)
        save_config(cfg, out / "config.json")
    sys.stdout.write(table + checks)
    if not result["passed"]:
        raise CheckFailed(f"{args.table}: ordering checks failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--preset", choices=PRESETS, help="built-in config used when --config is absent")
    common.add_argument("--seed", type=_u64, help="run seed (unsigned 64-bit)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--jobs", type=_positive, default=1, help="maximum worker processes")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="tubeletkit", description="Tubelet proposal and classification experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate train/test videos").set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train-tpn", parents=[common], help="train the regression layer")
    s.add_argument("--data", required=True)
    s.set_defaults(fn=cmd_train_tpn)

    s = sub.add_parser("gen-tubelets", parents=[common], help="write tubelet files")
    s.add_argument("--data", required=True)
    s.add_argument("--tpn", help="TPN checkpoint")
    s.add_argument("--classifier", help="score tubelets with this classifier checkpoint")
    s.add_argument("--ideal", action="store_true", help="write ideal tubelets of positive anchors")
    s.add_argument("--split", default="test", choices=["train", "test"])
    s.set_defaults(fn=cmd_gen_tubelets)

    s = sub.add_parser("train-lstm", parents=[common], help="train a tubelet classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--tpn", required=True)
    s.add_argument("--mode", choices=MODES)
    s.set_defaults(fn=cmd_train_lstm)

    s = sub.add_parser("evaluate", parents=[common], help="score tubelet files")
    s.add_argument("--data", required=True)
    s.add_argument("--tubelets", required=True)
    s.add_argument("--split", default="test", choices=["train", "test"])
    s.set_defaults(fn=cmd_evaluate)

    sub.add_parser("grad-check", parents=[common], help="run gradient checks").set_defaults(fn=cmd_grad_check)

    s = sub.add_parser("repro", parents=[common], help="run an ordering study")
    s.add_argument("table", choices=["table1", "table3"])
    s.set_defaults(fn=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except MissingInput as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CheckFailed as exc:
        log.error("check failed: %s", exc)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
