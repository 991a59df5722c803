import csv
import json

import pytest

from groupscore import __version__, cli
from groupscore.ingest import load_manifest_samples, write_manifest

SMALL_TRAIN = "epochs = 2\nactivity_hidden = 6\nweek_hidden = 4\nbatch_size = 16\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "synth.txt").write_text("n_accounts = 50\nconversion_rate = 0.3\n")
    (root / "train.txt").write_text(SMALL_TRAIN)
    codes = {
        "generate": run("generate", "--config", root / "synth.txt", "--seed", 3, "--out", root / "data"),
        "ingest": run("ingest", "--data", root / "data", "--out", root / "m", "--test-fraction", 0.3, "--workers", 1),
        "train": run("train", "--data", root / "m" / "train.jsonl", "--config", root / "train.txt", "--out", root / "t"),
        "eval": run("eval", "--data", root / "m" / "test.jsonl", "--model", root / "t" / "model",
                    "--bootstrap", 50, "--out", root / "e"),
        "score": run("score", "--data", root / "data", "--model", root / "t" / "model", "--out", root / "s", "--workers", 1),
        "analyze": run("analyze", "--data", root / "data", "--model", root / "t" / "model", "--out", root / "a", "--workers", 1),
    }
    return root, codes


def test_full_pipeline_exits_zero(pipeline):
    root, codes = pipeline
    assert codes == dict.fromkeys(codes, 0)
    for f in ("data/events.csv", "data/ground_truth.csv", "m/train.jsonl", "m/test.jsonl", "t/model/params.bin",
              "t/loss_curve.csv", "e/report.json", "e/per_week_auc.csv", "s/scores.csv", "a/correlation.json"):
        assert (root / f).is_file(), f
    report = json.loads((root / "e" / "report.json").read_text())
    assert 0.0 <= report["pooled_auc"] <= 1.0 and len(report["ci95"]) == 2


def test_every_command_writes_a_run_manifest(pipeline):
    root, _ = pipeline
    for sub, command in (("data", "generate"), ("m", "ingest"), ("t", "train"), ("e", "eval"), ("s", "score"), ("a", "analyze")):
        man = json.loads((root / sub / "run_manifest.json").read_text())
        assert man["command"] == command and man["version"] == __version__
        assert set(man) == {"command", "config", "inputs", "seed", "version", "outputs"}
        assert man["outputs"] == sorted(man["outputs"])
        for out in man["outputs"]:
            assert (root / sub / out).is_file()
        assert all(len(h) == 64 for h in man["inputs"].values())
    train = json.loads((root / "t" / "run_manifest.json").read_text())
    assert any(k.endswith("train.jsonl") for k in train["inputs"])
    assert not any(k.endswith("test.jsonl") for k in train["inputs"])


def test_score_csv_has_individual_columns(pipeline):
    root, _ = pipeline
    with open(root / "s" / "scores.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["account_id", "target_week", "account_score"] and len(rows) > 1


def test_reruns_are_byte_identical(pipeline, tmp_path):
    root, _ = pipeline
    assert run("generate", "--config", root / "synth.txt", "--seed", 3, "--out", tmp_path / "data") == 0
    for f in ("events.csv", "labels.csv", "individuals.csv", "accounts.csv", "ground_truth.csv"):
        assert (tmp_path / "data" / f).read_bytes() == (root / "data" / f).read_bytes()
    assert run("score", "--data", root / "data", "--model", root / "t" / "model", "--out", tmp_path / "s") == 0
    assert (tmp_path / "s" / "scores.csv").read_bytes() == (root / "s" / "scores.csv").read_bytes()
    assert (tmp_path / "s" / "run_manifest.json").read_bytes() == (root / "s" / "run_manifest.json").read_bytes()


def test_single_class_test_set_reports_auc_undefined(pipeline, tmp_path, capsys):
    root, _ = pipeline
    header, samples = load_manifest_samples(root / "m" / "test.jsonl")
    write_manifest(tmp_path / "neg.jsonl", [s for s in samples if not s.label], header)
    rc = run("eval", "--data", tmp_path / "neg.jsonl", "--model", root / "t" / "model", "--out", tmp_path / "e")
    assert rc == 3
    assert "AUC undefined" in capsys.readouterr().err


def test_training_refuses_test_manifest(pipeline, tmp_path, capsys):
    root, _ = pipeline
    rc = run("train", "--data", root / "m" / "test.jsonl", "--config", root / "train.txt", "--out", tmp_path / "t")
    assert rc == 2 and "refusing" in capsys.readouterr().err
    # a renamed copy is still caught by the split recorded in its header
    (tmp_path / "fit.jsonl").write_bytes((root / "m" / "test.jsonl").read_bytes())
    rc = run("train", "--data", tmp_path / "fit.jsonl", "--config", root / "train.txt", "--out", tmp_path / "t")
    assert rc == 2 and not (tmp_path / "t" / "model").exists()


def test_eval_on_training_accounts_is_leakage(pipeline, tmp_path, capsys):
    root, _ = pipeline
    rc = run("eval", "--data", root / "m" / "train.jsonl", "--model", root / "t" / "model", "--out", tmp_path / "e")
    assert rc == 4 and "leak" in capsys.readouterr().err.lower()


def test_missing_and_invalid_inputs(tmp_path, capsys):
    assert run("ingest", "--data", tmp_path / "nope", "--out", tmp_path / "m") == 2
    assert "not found" in capsys.readouterr().err
    (tmp_path / "bad.txt").write_text("n_accounts = 5\nthis line is wrong\n")
    assert run("generate", "--config", tmp_path / "bad.txt", "--out", tmp_path / "d") == 2
    assert "bad.txt:2" in capsys.readouterr().err
    (tmp_path / "neg.txt").write_text("n_accounts = 0\n")
    assert run("generate", "--config", tmp_path / "neg.txt", "--out", tmp_path / "d") == 2


def test_experiments_table_has_eleven_rows(pipeline, tmp_path):
    root, _ = pipeline
    (tmp_path / "tiny.txt").write_text("epochs = 1\nactivity_hidden = 4\nweek_hidden = 3\nbatch_size = 32\n")
    rc = run("experiments", "--data", root / "data", "--config", tmp_path / "tiny.txt", "--out", tmp_path / "x",
             "--test-fraction", 0.3, "--bootstrap", 20, "--workers", 1)
    assert rc == 0
    with open(tmp_path / "x" / "experiments.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["id"] for r in rows] == ["baseline1", "baseline2"] + [f"exp{i}" for i in range(1, 10)]
    assert all(0.0 <= float(r["pooled_auc"]) <= 1.0 for r in rows)
    assert [r["time_deltas"] for r in rows[-3:]] == ["1", "1", "1"]
