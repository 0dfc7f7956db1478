import subprocess
import sys

import pytest

from aslkit.cli import main

SMALL = [
    "--set", "model.embed_dim=16", "--set", "model.heads=2", "--set", "model.depth=1",
    "--set", "model.levels=3", "--set", "train.epochs=2", "--set", "train.batch=4",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--videos", "8", "--val", "2", "--length", "192", "--dim", "6", "--classes", "3"]) == 0
    assert main(["train-mq", "--data", str(data / "manifest.json"), "--out", str(root / "run"), *SMALL]) == 0
    return root


def read_kv(path):
    return dict(line.split("\t") for line in path.read_text().splitlines())


def test_train_writes_artifacts(pipeline):
    run = pipeline / "run"
    for name in ("config.txt", "train_log.tsv", "model.aslm", "predictions.tsv", "loss_curves.png", "sensitivity.png"):
        assert (run / name).is_file(), name
    for name in ("report.txt", "report.tsv", "pr_curves.tsv", "pr_curves.png", "map_vs_tiou.png"):
        assert (run / "eval" / name).is_file(), name
    assert len((run / "train_log.tsv").read_text().splitlines()) == 3
    assert "train.epochs=2" in (run / "config.txt").read_text().replace(" ", "")


def test_predict_then_eval_matches_training_report(pipeline):
    data = str(pipeline / "data" / "manifest.json")
    assert main(["predict", "--checkpoint", str(pipeline / "run" / "model.aslm"), "--data", data, "--out", str(pipeline / "pred")]) == 0
    assert (pipeline / "pred" / "predictions.tsv").read_bytes() == (pipeline / "run" / "predictions.tsv").read_bytes()
    assert main(["eval-mq", "--data", data, "--predictions", str(pipeline / "pred" / "predictions.tsv"), "--out", str(pipeline / "ev")]) == 0
    assert read_kv(pipeline / "ev" / "report.tsv") == read_kv(pipeline / "run" / "eval" / "report.tsv")


def test_ensemble_of_one_checkpoint_is_identity(pipeline):
    data = str(pipeline / "data" / "manifest.json")
    ck = str(pipeline / "run" / "model.aslm")
    assert main(["ensemble", "--data", data, "--checkpoints", ck, ck, "--out", str(pipeline / "ens")]) == 0
    assert read_kv(pipeline / "ens" / "report.tsv") == read_kv(pipeline / "run" / "eval" / "report.tsv")


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["train-mq", "--out", str(tmp_path)]) == 2
    assert main(["synth", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert main(["synth", "--out", str(tmp_path), "--threads", "0"]) == 2
    assert main(["synth", "--out", str(tmp_path), "--videos", "4", "--val", "9"]) == 2
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_3(tmp_path, pipeline):
    assert main(["train-mq", "--data", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "bad.tsv").write_text("garbage\n")
    data = str(pipeline / "data" / "manifest.json")
    assert main(["eval-mq", "--data", data, "--predictions", str(tmp_path / "bad.tsv"), "--out", str(tmp_path / "o")]) == 3


def test_mode_mismatch_is_usage_error(pipeline, tmp_path):
    data = str(pipeline / "data" / "manifest.json")
    assert main(["train-nlq", "--data", data, "--out", str(tmp_path)]) == 2


def test_nlq_pipeline(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--mode", "nlq", "--out", str(data), "--videos", "6", "--val", "2", "--length", "192", "--dim", "6"]) == 0
    assert main(["train-nlq", "--data", str(data / "manifest.json"), "--out", str(tmp_path / "run"), *SMALL]) == 0
    kv = read_kv(tmp_path / "run" / "eval" / "report.tsv")
    assert "R@1@0.3" in kv
    p = str(tmp_path / "run" / "predictions.tsv")
    assert main(["ensemble", "--data", str(data / "manifest.json"), "--predictions", p, p, "--out", str(tmp_path / "ens")]) == 0


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "aslkit", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gradcheck.tsv").read_text().splitlines()
    assert lines[0].startswith("check\t") and any(ln.startswith("end_to_end_mq") for ln in lines)
    assert "worst relative error" in capsys.readouterr().out
