"""Command-line subcommands, exit codes and artifact contracts."""

import hashlib
import json

import numpy as np
import pytest

from frhead.cli import main
from frhead.skeleton import read_dataset
from frhead.trainer import RunLog, load_config, load_model, parse_config

TINY_DATA = ["--classes", "8", "--joints", "5", "--frames", "8", "--per-class", "4", "--noise", "0.2"]
TINY_TRAIN = ["--epochs", "2", "--batch-size", "8", "--lr", "0.05", "--warmup", "0", "--decay", "",
              "--base-channels", "4", "--hidden", "8"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.skl"
    assert main(["gen-data", "--out", str(path), "--seed", "1"] + TINY_DATA) == 0
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_file):
    out = tmp_path_factory.mktemp("run")
    # single precision so checkpoints (stored as float32) reproduce the run bit for bit
    assert main(["train", "--data", str(data_file), "--out", str(out), "--precision", "float32"] + TINY_TRAIN) == 0
    return out


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_defaults_contract(tmp_path):
    path = tmp_path / "d.skl"
    assert main(["gen-data", "--out", str(path), "--per-class", "2", "--frames", "8"]) == 0
    ds, manifest = read_dataset(path)
    assert len(ds) == 20 and manifest.ambiguity and len(manifest.ambiguity) == 4


def test_gen_data_is_deterministic(tmp_path, data_file):
    again = tmp_path / "again.skl"
    assert main(["gen-data", "--out", str(again), "--seed", "1"] + TINY_DATA) == 0
    assert sha(again) == sha(data_file)


def test_gen_data_rejects_empty_classes(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x.skl"), "--per-class", "0"]) == 2
    assert "samples_per_class" in capsys.readouterr().err
    assert not (tmp_path / "x.skl").exists()


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["train", "--bogus"]) == 1
    assert main(["gen-data", "--per-class", "many"]) == 1
    assert main(["train", "--data", "x", "--out", "y", "--stages", "1,5"]) == 1
    assert main(["frobnicate"]) == 1


# ---------------------------------------------------------------------------
# train / eval


def test_train_writes_artifacts(trained, capsys):
    for name in ("checkpoint.frh", "last.frh", "runlog.csv", "runlog.json", "config.ini", "scores.npz",
                 "report/summary.json", "report/curves.csv", "report/curves.svg"):
        assert (trained / name).exists(), name
    log = RunLog.load(trained / "runlog.json")
    assert len(log.records) == 2
    cfg = load_config(trained / "config.ini")
    assert cfg.epochs == 2 and cfg.head.hidden == 8 and cfg.decay_epochs == ()


def test_train_echoes_config(tmp_path, data_file, capsys):
    argv = ["train", "--data", str(data_file), "--out", str(tmp_path), "--epochs", "1", "--decay", "",
            "--base-channels", "4", "--hidden", "8", "--lambda1", "0.1", "--lambda2", "0.2", "--lambda3", "0.5",
            "--lambda4", "1", "--tau", "0.2"]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "# command: frhead train" in out
    assert "lambdas = 0.1, 0.2, 0.5, 1.0" in out and "tau = 0.2" in out
    # the echoed block is a complete config file for this run
    echoed = out.split("# resolved config\n", 1)[1].split("\nepoch ", 1)[0]
    assert parse_config(echoed).to_dict() == load_config(tmp_path / "config.ini").to_dict()


def test_ablation_configs_differ_only_in_head_switches(tmp_path, data_file):
    logs = {}
    for variant in ("baseline", "full"):
        out = tmp_path / variant
        assert main(["train", "--data", str(data_file), "--out", str(out), "--ablation", variant] + TINY_TRAIN) == 0
        logs[variant] = RunLog.load(out / "runlog.json").config
    diff = {k for k in logs["baseline"] if logs["baseline"][k] != logs["full"][k]}
    assert diff == {"cl_loss", "st_decouple", "multi_level"}


def test_zero_weight_logs_cl_but_total_is_ce(tmp_path, data_file):
    assert main(["train", "--data", str(data_file), "--out", str(tmp_path), "--wcl", "0"] + TINY_TRAIN) == 0
    records = RunLog.load(tmp_path / "runlog.json").records
    assert any(r["loss_cl"] > 0 for r in records)
    assert all(r["loss_total"] == r["loss_ce"] for r in records)


def test_eval_train_split_matches_final_train_accuracy(tmp_path, trained, data_file):
    assert main(["eval", "--checkpoint", str(trained / "last.frh"), "--data", str(data_file), "--split", "train",
                 "--out", str(tmp_path), "--embeddings"]) == 0
    metrics = json.loads((tmp_path / "metrics_train.json").read_text())
    log = RunLog.load(trained / "runlog.json")
    assert metrics["accuracy"] == log.records[-1]["train_acc"]
    assert (tmp_path / "embeddings_train.csv").exists()


def test_eval_best_checkpoint_matches_saved_scores(tmp_path, trained, data_file):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.frh"), "--data", str(data_file),
                 "--out", str(tmp_path)]) == 0
    with np.load(tmp_path / "scores_test.npz") as a, np.load(trained / "scores.npz") as b:
        assert a["logits"].tobytes() == b["logits"].tobytes()
    log = RunLog.load(trained / "runlog.json")
    metrics = json.loads((tmp_path / "metrics_test.json").read_text())
    assert metrics["accuracy"] == log.summary()["best_eval_acc"]


def test_train_missing_data_exits_two(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.skl"), "--out", str(tmp_path)] + TINY_TRAIN) == 2


def test_checkpoint_metadata(trained):
    model, cfg, meta = load_model(trained / "checkpoint.frh")
    assert meta["best_epoch"] == RunLog.load(trained / "runlog.json").best_epoch
    assert model.backbone.config.base_channels == 4


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_impossible_tolerance_fails(capsys):
    assert main(["gradcheck", "--tolerance", "0", "--max-coords", "2"]) == 2
    first = capsys.readouterr().out
    assert "FAIL" in first
    assert main(["gradcheck", "--tolerance", "0", "--max-coords", "2"]) == 2
    line = lambda text: next(l for l in text.splitlines() if l.startswith("max relative error")).split(" (")[0]
    assert line(capsys.readouterr().out) == line(first)


# ---------------------------------------------------------------------------
# fuse / report


def test_fuse_single_stream_keeps_accuracy(tmp_path, trained, capsys):
    assert main(["fuse", "--scores", str(trained / "scores.npz"), "--out", str(tmp_path / "f.npz")]) == 0
    out = capsys.readouterr().out.splitlines()
    single = float(out[-2].rsplit(" ", 1)[1])
    fused = float(out[-1].rsplit(" ", 1)[1])
    assert fused == single
    with np.load(tmp_path / "f.npz") as z, np.load(trained / "scores.npz") as s:
        np.testing.assert_array_equal(z["fused"].argmax(axis=1), s["logits"].argmax(axis=1))


def test_fuse_mismatched_files_exit_two(tmp_path, trained):
    np.savez(tmp_path / "other.npz", logits=np.zeros((3, 8)), probs=np.zeros((3, 8)), labels=np.zeros(3, int))
    assert main(["fuse", "--scores", str(trained / "scores.npz"), str(tmp_path / "other.npz")]) == 2


def test_report_is_reproducible(tmp_path, trained):
    args = ["report", "--log", str(trained / "runlog.json"), "--scores", str(trained / "scores.npz")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("summary.json", "curves.csv", "curves.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (trained / "report" / "summary.json").read_bytes()


def test_report_on_truncated_log_names_field(tmp_path, trained, capsys):
    d = json.loads((trained / "runlog.json").read_text())
    del d["records"][1]["eval_acc"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert main(["report", "--log", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "eval_acc" in capsys.readouterr().err
    bad.write_text((trained / "runlog.json").read_text()[:200])
    assert main(["report", "--log", str(bad), "--out", str(tmp_path / "r")]) == 2
