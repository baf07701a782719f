import json

import pytest

from notecode.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, RunConfig, main

GOLDEN_REPORT = """\
| Model | Jaccard | F1 | PRAUC | Precision | Recall | DDI | Avg. # of Med. |
|---|---|---|---|---|---|---|---|
| C | 0.5000 | 0.6000 | 0.7000 | 0.8000 | 0.9000 | 0.0100 | 3.00 |
| T | 0.4000 | 0.5000 | 0.6000 | 0.7000 | 0.8000 | 0.0200 | 2.50 |
| C+T | 0.5500 | 0.6500 | 0.7500 | 0.8500 | 0.9500 | 0.0000 | 3.25 |
"""


def _metrics(j, f, a, p, r, d, n):
    return {"jaccard": j, "f1": f, "prauc": a, "precision": p, "recall": r, "ddi_rate": d,
            "avg_med_count": n, "visit_count": 10, "prauc_skipped": 0}


def _fake_runs(root, hashes=("h", "h", "h")):
    rows = {"C": _metrics(.5, .6, .7, .8, .9, .01, 3.0), "T": _metrics(.4, .5, .6, .7, .8, .02, 2.5),
            "C+T": _metrics(.55, .65, .75, .85, .95, 0.0, 3.25)}
    for (label, m), h in zip(rows.items(), hashes):
        d = root / "runs" / label
        d.mkdir(parents=True)
        (d / "metrics.json").write_text(json.dumps({"mode": label, "metrics": m, "data_hash": h}))


def test_report_golden(tmp_path, capsys):
    _fake_runs(tmp_path)
    assert main(["report", "--workdir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "report.md").read_text() == GOLDEN_REPORT
    assert (tmp_path / "report.csv").read_text().splitlines()[3].startswith("C+T,0.55,")


def test_report_refuses_mixed_data(tmp_path, capsys):
    _fake_runs(tmp_path, hashes=("h1", "h1", "h2"))
    assert main(["report", "--workdir", str(tmp_path)]) == EXIT_DATA
    assert "different datasets" in capsys.readouterr().err


def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--workdir", str(tmp_path / d), "--patients", "50", "--seed", "7"]) == EXIT_OK
    for name in ("patients.jsonl", "notes.jsonl", "ddi.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_usage_errors(tmp_path, capsys):
    assert main(["train", "--workdir", str(tmp_path)]) == EXIT_USAGE  # --mode missing
    assert main(["synth", "--bogus"]) == EXIT_USAGE
    assert main(["synth", "--workdir", str(tmp_path), "--alpha", "2"]) == EXIT_USAGE


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"patients": 12, "seed": 3, "epochs": 9}))
    assert main(["synth", "--workdir", str(tmp_path / "w"), "--config", str(cfg), "--seed", "4"]) == EXIT_OK
    echoed = json.loads(capsys.readouterr().out.splitlines()[0])["config"]
    assert (echoed["patients"], echoed["seed"], echoed["epochs"]) == (12, 4, 9)
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["synth", "--workdir", str(tmp_path / "w"), "--config", str(cfg)]) == EXIT_USAGE


def test_workers_from_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NOTECODE_WORKERS", "3")
    main(["synth", "--workdir", str(tmp_path), "--patients", "8"])
    assert json.loads(capsys.readouterr().out.splitlines()[0])["config"]["workers"] == 3


def test_missing_prerequisites(tmp_path, capsys):
    w = str(tmp_path)
    assert main(["preprocess", "--workdir", w]) == EXIT_DATA
    assert "run synth first" in capsys.readouterr().err
    for cmd in (["synth"], ["preprocess"], ["build-graph"]):
        assert main(cmd + ["--workdir", w, "--patients", "20"]) == EXIT_OK
    assert main(["evaluate", "--workdir", w, "--mode", "C+T"]) == EXIT_DATA
    assert "run extract first" in capsys.readouterr().err
    assert main(["evaluate", "--workdir", w, "--mode", "C"]) == EXIT_DATA
    assert "run train --mode C first" in capsys.readouterr().err


def test_pipeline_artifacts(tmp_path, capsys):
    w = str(tmp_path)
    common = ["--workdir", w, "--patients", "24", "--epochs", "2", "--embed-dim", "16", "--ff-dim", "32"]
    for cmd in (["synth"], ["preprocess"], ["extract"], ["build-graph"], ["train", "--mode", "C+T"],
                ["evaluate", "--mode", "C+T"], ["report"]):
        assert main(cmd + common) == EXIT_OK, cmd
    run = tmp_path / "runs" / "C+T"
    lines = (run / "train_report.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["epoch"] == 1
    assert len(list((run / "checkpoints").glob("*.safetensors"))) == 2
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["run_config_hash"] == json.loads((tmp_path / "preprocessed" / "split.json").read_text())[
        "run_config_hash"]
    for artifact in ("preprocessed/vocab.json", "preprocessed/stats.json", "graphs/provenance.json",
                     "reprs/provenance.json"):
        assert "run_config_hash" in json.loads((tmp_path / artifact).read_text())
    assert (tmp_path / "report.md").read_text().count("\n") == 3


def test_run_config_hash_tracks_values():
    assert RunConfig().hash() == RunConfig().hash() != RunConfig(seed=8).hash()
