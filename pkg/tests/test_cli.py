from __future__ import annotations

import json
from pathlib import Path

import pytest

from mmgbench.cli import main

CONFIG = """
[dataset]
nodes = "movies/nodes.jsonl"
edges = "movies/edges.txt"
classes = "movies/classes.txt"
token_dir = "movies/tokens"

[dataset.embeddings]
text = "movies/text.emb"
image = "movies/image.emb"

[experiment]
name = "cli"
seeds = [0]
output_dir = "out"

[gnn]
epochs = 10
hidden = 8

[predictor]
max_nodes = 5

[client]
kind = "mock"
mock_default = "Comedy"
"""


def _setup(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> Path:
    assert main(["synth", "--kind", "movies", "--nodes", "40", "--out", str(tmp_path / "movies")]) == 0
    assert capsys.readouterr().out.startswith("synth_complete kind=movies")
    path = tmp_path / "experiment.toml"
    path.write_text(CONFIG, encoding="utf-8")
    return path


def test_synthetic_graph_kinds(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["synth", "--kind", "two-cluster", "--nodes", "20", "--out", str(tmp_path)]) == 0
    assert "synth_complete kind=two-cluster nodes=20" in capsys.readouterr().out


def test_ingest_split_and_report(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _setup(tmp_path, capsys)
    assert main(["ingest", "--config", str(config)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ingest_complete nodes=40")
    assert (tmp_path / "out" / "cli" / "ingest_report.json").exists()

    assert main(["split", "--config", str(config)]) == 0
    assert capsys.readouterr().out.startswith("split_complete train=24 val=8 test=8")

    log_file = tmp_path / "logs" / "report.jsonl"
    assert main(["report", "--config", str(config), "--log-file", str(log_file)]) == 0
    assert "report_complete name=cli paradigm=encoder model=gcn" in capsys.readouterr().out
    records = [json.loads(line) for line in log_file.read_text(encoding="utf-8").splitlines()]
    finished = [r for r in records if r["message"] == "experiment finished"]
    assert finished and finished[0]["experiment"] == "cli" and finished[0]["failed_seeds"] == 0

    assert main(["report", "--summarize", str(tmp_path / "out")]) == 0
    assert "| cli | encoder | gcn |" in capsys.readouterr().out


def test_predict_then_evaluate(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _setup(tmp_path, capsys)
    assert main(["predict", "--config", str(config)]) == 0
    assert capsys.readouterr().out.startswith("predict_complete nodes=5")
    predictions = tmp_path / "out" / "cli" / "predictions.json"
    assert json.loads(predictions.read_text(encoding="utf-8"))["predictions"] == [3] * 5

    assert main(["evaluate", "--predictions", str(predictions)]) == 0
    assert capsys.readouterr().out.startswith("evaluate_complete accuracy=")
    assert (tmp_path / "out" / "cli" / "evaluation.json").exists()


def test_export_commands(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _setup(tmp_path, capsys)
    assert main(["export-tokens", "--config", str(config), "--max-nodes", "6", "--modality", "image"]) == 0
    assert capsys.readouterr().out.startswith("export_tokens_complete nodes=6 modality=image")
    assert (tmp_path / "out" / "cli" / "tokens" / "manifest.json").exists()

    assert main(["export-sft", "--config", str(config)]) == 0
    assert capsys.readouterr().out.startswith("export_sft_complete records=24")


def test_structure_gain_command(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    results = tmp_path / "results.json"
    toys = {
        "gcn": {"accuracy": 0.8, "structure_aware": True},
        "mlp": {"accuracy": 0.75, "structure_aware": False},
    }
    results.write_text(json.dumps({"toys": toys}), encoding="utf-8")
    assert main(["structure-gain", "--results", str(results), "--out", str(tmp_path / "gain")]) == 0
    assert "toys=+0.0500" in capsys.readouterr().out


def test_validation_failures_exit_one(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["report", "--config", str(tmp_path / "absent.toml")]) == 1
    assert main(["ingest"]) == 1
    assert main(["evaluate", "--predictions", str(tmp_path / "absent.json")]) == 1

    config = _setup(tmp_path, capsys)
    bad = tmp_path / "bad.toml"
    bad.write_text(config.read_text(encoding="utf-8") + "\n[telemetry]\nenabled = true\n", encoding="utf-8")
    assert main(["report", "--config", str(bad)]) == 1


@pytest.mark.parametrize(
    "content",
    [
        "{not json",
        json.dumps({"classes": ["a"]}),
        json.dumps({"classes": ["a"], "predictions": [0], "gold": None}),
        json.dumps({"classes": ["a", "b"], "predictions": ["x"], "gold": [0]}),
        json.dumps({"classes": ["a"], "predictions": [0], "gold": [3]}),
    ],
)
def test_malformed_predictions_exit_one(tmp_path: Path, content: str) -> None:
    predictions = tmp_path / "predictions.json"
    predictions.write_text(content, encoding="utf-8")
    assert main(["evaluate", "--predictions", str(predictions)]) == 1
    assert not (tmp_path / "evaluation.json").exists()


@pytest.mark.parametrize(
    "content",
    ["[1, 2", json.dumps({"toys": {"gcn": {"structure_aware": True}}}), json.dumps({"toys": [1, 2]})],
)
def test_malformed_structure_results_exit_one(tmp_path: Path, content: str) -> None:
    results = tmp_path / "results.json"
    results.write_text(content, encoding="utf-8")
    assert main(["structure-gain", "--results", str(results), "--out", str(tmp_path / "gain")]) == 1


def test_alignment_failures_exit_two(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _setup(tmp_path, capsys)
    nodes = tmp_path / "movies" / "nodes.jsonl"
    records = [json.loads(line) for line in nodes.read_text(encoding="utf-8").splitlines()]
    del records[0]["image_path"]
    nodes.write_text("".join(json.dumps(record) + "\n" for record in records), encoding="utf-8")
    assert main(["align", "--config", str(config), "--max-nodes", "3"]) == 2
    assert "errors=1" in capsys.readouterr().out
