from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from tubeletkit.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from tubeletkit.config import ExperimentConfig, save_config
from tubeletkit.tubelet import TubeletProposal, read_tubelets, write_tubelets

SMALL = {
    "schema_version": 1,
    "seed": 3,
    "data": {"n_train_videos": 2, "n_test_videos": 1, "anchor_stride": 6},
    "tpn": {"window": 3, "two_frame_epochs": 2, "multi_epochs": 1},
    "tubelet": {"length": 6, "anchor_stride": 10},
    "classifier": {"hidden": 4, "iterations": 5, "tubelet_length": 5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_config(ExperimentConfig.from_dict(SMALL), root / "small.json")
    assert main(["gen-data", "--config", str(root / "small.json"), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train-tpn", "--data", str(root / "data"), "--out", str(root / "tpn")]) == EXIT_OK
    return root


def test_gen_data_is_byte_identical(workdir, tmp_path):
    assert main(["gen-data", "--config", str(workdir / "small.json"), "--out", str(tmp_path)]) == EXIT_OK
    for split, n in (("train", 2), ("test", 1)):
        names = sorted(p.name for p in (tmp_path / split).iterdir())
        assert names == [f"video_{i:03d}.json" for i in range(n)]
        for name in names:
            assert (tmp_path / split / name).read_bytes() == (workdir / "data" / split / name).read_bytes()


def test_seed_flag_changes_data(workdir, tmp_path):
    main(["gen-data", "--config", str(workdir / "small.json"), "--seed", "4", "--out", str(tmp_path)])
    assert (tmp_path / "test/video_000.json").read_bytes() != (workdir / "data/test/video_000.json").read_bytes()
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 4


def test_train_tpn_outputs(workdir):
    losses = json.loads((workdir / "tpn/tpn_loss.json").read_text())
    assert len(losses["w2"]) == 2 and len(losses["w3"]) == 1
    assert (workdir / "tpn/tpn.npz").is_file() and (workdir / "tpn/tpn_w2.npz").is_file()


def test_ideal_tubelets_evaluate_perfectly(workdir, tmp_path, capsys):
    data = str(workdir / "data")
    assert main(["gen-tubelets", "--data", data, "--ideal", "--out", str(tmp_path / "t")]) == EXIT_OK
    assert main(["evaluate", "--data", data, "--tubelets", str(tmp_path / "t"), "--out", str(tmp_path)]) == EXIT_OK
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["mean_iou"] == 1.0 and m["mad"] == 0.0 and m["skipped"] == 0
    assert "mean_iou=1.0" in capsys.readouterr().out


def test_predicted_tubelets_evaluate(workdir, tmp_path):
    data = str(workdir / "data")
    assert main(["gen-tubelets", "--data", data, "--tpn", str(workdir / "tpn/tpn.npz"), "--out", str(tmp_path / "t")]) == EXIT_OK
    tubs = read_tubelets(tmp_path / "t/video_000.tubelets.tsv")
    assert tubs and all(t.length == 6 for t in tubs)
    assert main(["evaluate", "--data", data, "--tubelets", str(tmp_path / "t"), "--out", str(tmp_path)]) == EXIT_OK
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert 0.0 < m["mean_iou"] < 1.0


def test_scored_pipeline(workdir, tmp_path):
    data, tpn = str(workdir / "data"), str(workdir / "tpn/tpn.npz")
    assert main(["train-lstm", "--data", data, "--tpn", tpn, "--mode", "vanilla_lstm", "--out", str(tmp_path)]) == EXIT_OK
    assert len(json.loads((tmp_path / "classifier_loss.json").read_text())["vanilla_lstm"]) == 5
    args = ["gen-tubelets", "--data", data, "--tpn", tpn, "--classifier", str(tmp_path / "classifier.npz")]
    assert main(args + ["--out", str(tmp_path / "t")]) == EXIT_OK
    tubs = read_tubelets(tmp_path / "t/video_000.tubelets.tsv")
    np.testing.assert_allclose(tubs[0].scores.sum(axis=1), 1.0, atol=1e-12)
    assert main(["evaluate", "--data", data, "--tubelets", str(tmp_path / "t"), "--out", str(tmp_path)]) == EXIT_OK
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert 0.0 <= m["mean_ap"] <= 1.0 and 0.0 <= m["corloc"] <= 1.0


def test_grad_check(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "grad_check.json").read_text())
    assert report["passed"] is True
    assert "max_rel_error.encoder_decoder=" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_data(self, tmp_path):
        assert main(["train-tpn", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == EXIT_MISSING

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_MISSING

    def test_missing_checkpoint(self, workdir, tmp_path):
        args = ["gen-tubelets", "--data", str(workdir / "data"), "--tpn", str(tmp_path / "x.npz"), "--out", str(tmp_path)]
        assert main(args) == EXIT_MISSING

    def test_needs_tpn_or_ideal(self, workdir, tmp_path):
        assert main(["gen-tubelets", "--data", str(workdir / "data"), "--out", str(tmp_path)]) == EXIT_MISSING

    def test_bad_config(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"schema_version": 1, "tpn": {"window": 0}}))
        assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_no_positive_tubelets(self, workdir, tmp_path):
        (tmp_path / "t").mkdir()
        nowhere = TubeletProposal(0, np.tile([[1.0, 1.0, 4.0, 4.0]], (3, 1)), np.zeros(4))
        write_tubelets(tmp_path / "t/video_000.tubelets.tsv", [nowhere])
        args = ["evaluate", "--data", str(workdir / "data"), "--tubelets", str(tmp_path / "t"), "--out", str(tmp_path)]
        assert main(args) == EXIT_CHECK

    @pytest.mark.parametrize("argv", [["gen-data", "--seed", "-1"], ["gen-data", "--jobs", "0"], ["bogus"]])
    def test_usage_errors(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "tubeletkit", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "repro" in r.stdout


def test_repro_worker_count_does_not_change_output(workdir, tmp_path):
    small = json.loads((workdir / "small.json").read_text())
    small["repro"] = {"seeds": [0, 1]}
    small["tubelet"]["length"] = 20
    (tmp_path / "c.json").write_text(json.dumps(small))
    codes = []
    for jobs in (1, 2):
        codes.append(main(["repro", "table1", "--config", str(tmp_path / "c.json"), "--jobs", str(jobs),
                           "--out", str(tmp_path / f"j{jobs}"), "--log-level", "WARNING"]))
    assert codes[0] == codes[1] and codes[0] in (EXIT_OK, EXIT_CHECK)
    assert (tmp_path / "j1/metrics.json").read_bytes() == (tmp_path / "j2/metrics.json").read_bytes()
