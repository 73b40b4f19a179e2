import csv
import json

import pytest

from ncenet import cli
from ncenet import pipeline as pl
from ncenet.exceptions import InvalidConfig

TINY = {
    "stream": {"base_classes": 4, "novel_classes_per_session": 2, "sessions": 1, "train_per_class": 20, "test_per_class": 5, "ambient_dim": 8},
    "model": {"input_dim": 8, "encoder_dims": [8, 8], "feature_dim": 8, "head_hidden_dim": 8, "head_output_dim": 8},
    "base": {"epochs": 2, "batch_size": 32},
    "incremental": {"epochs": 1, "batch_size": 16},
    "eval": {"restarts": 2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("CGCD_SEED", "11")
    assert pl.resolve_seed(3, None) == 11
    assert pl.resolve_seed(3, 5) == 5
    assert pl.resolve_seed(3, None, use_env=False) == 3
    cfg = pl.resolve_config({"seed": 3}, "desk", None)
    assert cfg.stream.seed == cfg.incremental.seed == 11


def test_profiles_and_unknown_fields():
    assert pl.resolve_config({}, "paper", 0, use_env=False).base.lr_init == 0.01
    with pytest.raises(InvalidConfig):
        pl.resolve_config({"strem": {}}, "desk", 0)
    with pytest.raises(InvalidConfig):
        pl.resolve_config({"base": {"epoch": 1}}, "desk", 0)
    with pytest.raises(InvalidConfig):
        pl.resolve_config({}, "laptop", 0)


def test_sweep_and_ablation_points():
    cfg = pl.resolve_config({"sweep": {"param": "incremental.blend.lambda_b", "values": [0.1, 0.5]}}, "desk", 0, use_env=False)
    assert pl.sweep_points(cfg) == [("lambda_b_0.1", {"incremental.blend.lambda_b": 0.1}), ("lambda_b_0.5", {"incremental.blend.lambda_b": 0.5})]
    assert [n for n, _ in pl.ablation_points(cfg)] == list(pl.DEFAULT_ABLATION)
    assert cfg.patched({"incremental.blend.lambda_b": 0.5}).incremental.blend.lambda_b == 0.5
    assert cfg.incremental.blend.lambda_b == 0.1


def test_train_base_writes_artifacts(config, tmp_path):
    out = tmp_path / "base"
    before = config.read_bytes()
    assert cli.main(["train-base", "--config", str(config), "--out", str(out), "--seed", "1"]) == 0
    assert (out / "session0.ckpt").exists() and (out / "loss_trace.csv").exists()
    manifest = pl.read_manifest(out)
    assert manifest.exit_status == 0 and manifest.seeds["run"] == 1
    assert set(manifest.artifacts) == {"session0.ckpt", "loss_trace.csv"}
    assert config.read_bytes() == before


def test_run_stream_and_replay(config, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run-stream", "--config", str(config), "--out", str(out), "--seed", "2"]) == 0
    report = read_csv(out / "report.csv")
    assert [r["session"] for r in report] == ["0", "1"]
    assert len(read_csv(out / "summary.csv")) == 1
    assert {"session", "epoch", "ncrl", "bckd"} <= set(read_csv(out / "loss_trace.csv")[0])
    again = tmp_path / "again"
    assert cli.main(["run-stream", "--manifest", str(out / "manifest.json"), "--out", str(again)]) == 0
    first, second = pl.read_manifest(out).artifacts, pl.read_manifest(again).artifacts
    assert first == second

    ev = tmp_path / "eval"
    assert cli.main(["evaluate", "--config", str(config), "--seed", "2", "--checkpoints", str(out), "--out", str(ev)]) == 0
    assert (ev / "report.csv").read_text() == (out / "report.csv").read_text()


def test_sweep_and_ablate_emit_one_summary_per_point(config, tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(config), "--out", str(out), "--param", "incremental.blend.lambda_b", "--values", "0.1,0.9"]
    assert cli.main(args) == 0
    assert [r["point"] for r in read_csv(out / "summary.csv")] == ["lambda_b_0.1", "lambda_b_0.9"]
    out = tmp_path / "ablate"
    assert cli.main(["ablate", "--config", str(config), "--out", str(out), "--variants", "full,no_ncrl,no_bckd"]) == 0
    assert [r["point"] for r in read_csv(out / "summary.csv")] == ["full", "no_ncrl", "no_bckd"]
    assert (out / "no_bckd" / "session1.ckpt").exists()


def test_config_errors_exit_1(tmp_path, config):
    assert cli.main(["train-base", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "a")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"base": {"epochs": 0}}')
    assert cli.main(["train-base", "--config", str(bad), "--out", str(tmp_path / "b")]) == 1
    bad.write_text("[1, 2]")
    assert cli.main(["train-base", "--config", str(bad), "--out", str(tmp_path / "c")]) == 1
    assert cli.main(["ablate", "--config", str(config), "--out", str(tmp_path / "d"), "--variants", "nope"]) == 1
    assert cli.main(["evaluate", "--config", str(config), "--out", str(tmp_path / "e")]) == 1


def test_runtime_error_exit_2(tmp_path):
    cfg = {**TINY, "dataset": str(tmp_path / "no_dataset")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["train-base", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert pl.read_manifest(tmp_path / "o").exit_status == 2


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert cli.main(["gradcheck", "--batches", "2", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["sup", "unsup", "ncrl", "sa", "ta", "bckd", "kl"]
    assert cli.main(["gradcheck", "--batches", "1", "--corrupt", "matmul"]) == 3
    assert cli.main(["gradcheck", "--batches", "1", "--corrupt", "no_such_op"]) == 1
