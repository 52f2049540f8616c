import json
import os

import numpy as np
import pytest

from scentvc.cli import build_parser, main

TINY_CONFIG = """
warm_epochs = 1
extra_epochs = 1
model.encoder_dim = 8
model.attention_rnn_dim = 8
model.decoder_rnn_dim = 8
model.attention_dim = 4
model.prenet_dims = 4, 4
model.postnet_channels = 4
model.location_kernel = 5
model.location_filters = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert main(["gen-synthetic", "--out", str(root / "data"), "--count", "4", "--valid", "2", "--test", "2"]) == 0
    return root


def test_gen_synthetic_writes_manifests(workspace):
    for name in ("train", "valid", "test"):
        lines = (workspace / "data" / f"{name}.tsv").read_text().strip().splitlines()
        assert len(lines) == {"train": 4, "valid": 2, "test": 2}[name]


def test_augment_stats(workspace, capsys):
    assert main(["augment", "--manifest", str(workspace / "data" / "train.tsv"), "--stats"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["num_pairs"] == 4 and stats["total_fragments"] >= 4


def test_train_convert_evaluate_strip(workspace, capsys):
    data, run = workspace / "data", workspace / "run"
    assert main(["train", "--manifest", str(data / "train.tsv"), "--valid-manifest", str(data / "valid.tsv"),
                 "--config", str(workspace / "tiny.cfg"), "--mode", "mt", "--out", str(run)]) == 0
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 2
    assert main(["convert", "--checkpoint", str(run / "model.ckpt"), "--manifest", str(data / "test.tsv"),
                 "--out", str(run / "conv")]) == 0
    assert len(list((run / "conv").glob("*.trk"))) == 2
    capsys.readouterr()
    report = run / "report.json"
    assert main(["evaluate", "--converted", str(run / "conv"), "--reference", str(data / "test.tsv"),
                 "--report", str(report), "--csv", str(run / "eval.csv")]) == 0
    result = json.loads(report.read_text())
    assert len(result["utterances"]) == 2
    assert {"mcd", "f0_rmse", "monotonicity_violation", "coverage_deficit", "repeat_score"} <= set(result["mean"])
    assert main(["strip-classifiers", "--checkpoint", str(run / "model.ckpt"), "--out", str(run / "slim.ckpt")]) == 0
    assert main(["convert", "--checkpoint", str(run / "slim.ckpt"), "--manifest", str(data / "test.tsv"),
                 "--out", str(run / "conv_slim")]) == 0
    for path in (run / "conv").glob("*"):
        assert path.read_bytes() == (run / "conv_slim" / path.name).read_bytes()


def test_resume_flag(workspace):
    data, run = workspace / "data", workspace / "resume"
    args = ["train", "--manifest", str(data / "train.tsv"), "--config", str(workspace / "tiny.cfg"),
            "--out", str(run)]
    assert main(args + ["--max-epochs", "1"]) == 0
    assert main(args + ["--resume"]) == 0
    epochs = [json.loads(l)["epoch"] for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert epochs == [1, 2]


def test_experiment_grid(workspace, capsys):
    out = workspace / "exp"
    args = ["experiment", "--out", str(out), "--sizes", "2", "--modes", "baseline", "mt", "--seeds", "0",
            "--config", str(workspace / "tiny.cfg")]
    assert main(args + ["--no-train"]) == 1
    assert "missing checkpoint for cell baseline_n2_s0" in capsys.readouterr().err
    assert main(args + ["--csv", str(out / "grid.csv")]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["grid"]["2"]) == {"baseline", "mt"}
    assert report["trend"]["2"]["best_mcd"] in ("baseline", "mt")
    header = (out / "grid.csv").read_text().splitlines()[0]
    assert header == "size,baseline_mcd_db,baseline_f0_rmse_hz,mt_mcd_db,mt_f0_rmse_hz"
    # evaluating the cells directory again gives the same grid
    capsys.readouterr()
    assert main(["evaluate", "--converted", str(out / "cells"), "--reference", str(out / "corpus" / "test.tsv"),
                 "--report", str(out / "again.json")]) == 0
    again = json.loads((out / "again.json").read_text())
    assert again["grid"]["2"]["mt"]["mcd"] == pytest.approx(report["grid"]["2"]["mt"]["mcd"])


def test_errors_exit_nonzero(workspace, capsys):
    assert main(["augment", "--manifest", str(workspace / "missing.tsv")]) == 1
    assert "error" in capsys.readouterr().err
    bad = workspace / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["train", "--manifest", str(workspace / "data" / "train.tsv"), "--config", str(bad),
                 "--out", str(workspace / "x")]) == 1
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--mode", "other", "--manifest", "m", "--out", "o"])
