import csv
import json

import pytest

from kgcmi.cli import main
from kgcmi.harness.bench import BENCH_COLUMNS
from kgcmi.harness.train import METRIC_COLUMNS

TINY = {"d": 8, "num_queries": 4, "ssm_state": 4, "n_train": 16, "n_test": 8, "epochs": 1}


def _config(tmp_path, **extra):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**TINY, **extra}))
    return path


def test_train_with_config_file(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(_config(tmp_path)), "--out", str(out)]) == 0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == METRIC_COLUMNS and len(rows) == 4
    assert (out / "checkpoint.npz").exists() and (out / "checkpoint.json").exists()


def test_train_multiple_seeds(tmp_path):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(_config(tmp_path, epochs=0)), "--seeds", "3,4", "--out", str(out)]) == 0
    assert (out / "seed3" / "metrics.csv").exists() and (out / "seed4" / "metrics.csv").exists()


def test_existing_output_is_runtime_error(tmp_path, capsys):
    args = ["train", "--config", str(_config(tmp_path, epochs=0)), "--out", str(tmp_path / "o")]
    assert main(args) == 0
    assert main(args) == 1
    assert "FileExistsError" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("args", [["train", "--set", "nope=1"], ["train", "--set", "d=-3"],
                                  ["bench", "--lengths", "256,512"], ["bench", "--lengths", "a,b"], []])
def test_usage_errors(args, capsys):
    assert main(args) == 2


def test_missing_config_file_is_usage_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_bench_to_stdout_and_file(tmp_path, capsys):
    assert main(["bench", "--lengths", "16,32,64", "--repeats", "1", "--set", "d=8", "--set", "ssm_state=4"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.splitlines()
    assert lines[0].split(",") == BENCH_COLUMNS and len(lines) == 7
    assert "log-log slope cmm" in captured.err
    out = tmp_path / "bench.csv"
    assert main(["bench", "--lengths", "16,32,64", "--repeats", "1", "--set", "d=8", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0].split(",") == BENCH_COLUMNS


def test_kg_validate(tmp_path, capsys):
    from kgcmi.harness.tasks import synthetic_graph

    good = tmp_path / "kg.json"
    synthetic_graph(2, 2).save(good)
    assert main(["kg", "validate", str(good)]) == 0
    assert "valid" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": [{"id": 0, "label": "g", "kind": "global", "organ": None},
                                         {"id": 1, "label": "f", "kind": "finding", "organ": 9}]}))
    assert main(["kg", "validate", str(bad)]) == 1
    assert "node 1" in capsys.readouterr().err


def test_eval_checkpoint(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(_config(tmp_path, epochs=0)), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint")]) == 0
    text = capsys.readouterr().out.splitlines()
    assert text[0].split(",") == METRIC_COLUMNS
    assert [line.split(",")[:2] for line in text[1:]] == [["-1", "train"], ["-1", "test"]]
    # the evaluation of the untouched initialization reproduces the epoch-0 rows
    with open(out / "metrics.csv") as fh:
        trained = fh.read().splitlines()
    assert [r.split(",")[2:] for r in trained[1:]] == [r.split(",")[2:] for r in text[1:]]


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "all groups pass" in capsys.readouterr().out


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    from kgcmi import famt

    real = famt.classify_backward

    def corrupted(dlogits, params, cache):
        grads, dx = real(dlogits, params, cache)
        grads["w2"] = grads["w2"] + 1.0
        return grads, dx

    monkeypatch.setattr(famt, "classify_backward", corrupted)
    assert main(["gradcheck"]) == 3
    assert "famt.cls" in capsys.readouterr().out
