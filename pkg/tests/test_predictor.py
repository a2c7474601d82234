from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import pytest

from mmgbench.aligner import AlignerArtifacts
from mmgbench.config import PredictorSettings, StructureSelectSpec
from mmgbench.embedding_io import EmbeddingTable
from mmgbench.errors import Ambiguous, ConfigInvalid, EmptyInput, MissingImage, Unparseable
from mmgbench.graph import NodeRecord, build_graph, load_graph, split_nodes
from mmgbench.predictor import (
    build_prediction_prompt,
    export_sft_dataset,
    normalize_label,
    parse_label,
    predict_nodes,
    select_exemplars,
)
from mmgbench.synthetic import MOVIE_CLASSES, write_movies_fixture
from mmgbench.vlm_client import ImageSegment, MockVlmClient, PromptBundle

TARGET = re.compile(r"Title and description: Movie (\d+):")


@pytest.fixture
def movies(tmp_path: Path):
    paths = write_movies_fixture(tmp_path / "movies", num_nodes=60)
    return load_graph(paths.nodes, paths.edges, paths.classes, paths.embeddings)


def _target(bundle: PromptBundle) -> int:
    return int(TARGET.findall(bundle.text)[-1])


def gold_responder(graph):
    return lambda bundle: graph.classes[graph.nodes[_target(bundle)].label]


def test_gold_mock_scores_perfectly(movies) -> None:
    run = predict_nodes(MockVlmClient(responder=gold_responder(movies)), movies, range(50), movies.classes)
    assert run.accuracy == 1.0
    assert run.unparseable == 0 and run.errors == {}
    assert run.nodes == list(range(50))


def test_half_gold_mock_scores_one_half(movies) -> None:
    def respond(bundle: PromptBundle) -> str:
        v = _target(bundle)
        label = movies.nodes[v].label
        return movies.classes[label] if v % 2 == 0 else movies.classes[(label + 1) % movies.num_classes]

    run = predict_nodes(MockVlmClient(responder=respond), movies, range(50), movies.classes)
    assert run.accuracy == 0.5


def test_unparseable_answers_are_tallied_and_can_be_retried(movies) -> None:
    run = predict_nodes(MockVlmClient(default="no idea"), movies, range(10), movies.classes)
    assert run.unparseable == 10 and run.unparseable_rate == 1.0
    assert run.predictions == [-1] * 10

    gold = gold_responder(movies)

    def stubborn(bundle: PromptBundle) -> str:
        return gold(bundle) if "Answer with exactly one category" in bundle.text else "hmm"

    opts = PredictorSettings(retry_unparseable=True)
    run = predict_nodes(MockVlmClient(responder=stubborn), movies, range(10), movies.classes, opts)
    assert run.retried == 10 and run.accuracy == 1.0


def test_ambiguous_answers_are_counted_separately(movies) -> None:
    run = predict_nodes(MockVlmClient(default="Drama or Comedy"), movies, range(4), movies.classes)
    assert run.ambiguous == 4 and run.unparseable == 0


@pytest.mark.parametrize(
    ("response", "expected"),
    [
        ("Documentary", 5),
        ("The category is: documentary.", 5),
        ("  SCIENCE   fiction!! ", 14),
        ("Music", 10),
        ("Musical", 11),
        ("I think dramas", 6),
    ],
)
def test_parse_label_matches(response: str, expected: int) -> None:
    assert parse_label(response, MOVIE_CLASSES) == expected
    assert parse_label(response.upper(), MOVIE_CLASSES) == expected


def test_parse_label_failures() -> None:
    with pytest.raises(Ambiguous):
        parse_label("Either drama or comedy", MOVIE_CLASSES)
    with pytest.raises(Ambiguous):
        parse_label("It is a musical film", MOVIE_CLASSES)
    with pytest.raises(Unparseable):
        parse_label("a cooking show", MOVIE_CLASSES)
    with pytest.raises(EmptyInput):
        parse_label("x", [])
    with pytest.raises(ConfigInvalid):
        parse_label("x", ["Drama", "drama!"])


def test_normalization_is_idempotent() -> None:
    once = normalize_label("  Sci-Fi:   THE Return ")
    assert once == "scifi the return"
    assert normalize_label(once) == once


def test_structure_modes_shape_the_prompt(movies) -> None:
    spec = StructureSelectSpec(k=3, h=1, similarity_features="fused")
    v = int(np.argmax(np.asarray(movies.adjacency.sum(axis=1)).reshape(-1)))
    plain = build_prediction_prompt(movies, v, movies.classes)
    assert "Co-purchased" not in plain.text
    assert len(plain.image_paths) == 1

    text = build_prediction_prompt(movies, v, movies.classes, "text", spec)
    assert "Co-purchased or co-reviewed products: Title1: " in text.text
    assert len(text.image_paths) == 1

    both = build_prediction_prompt(movies, v, movies.classes, "both", spec)
    images = [s for s in both.segments if isinstance(s, ImageSegment)]
    assert len(images) == 4
    for i in (1, 2, 3):
        assert f"Picture{i}: <image>; Title{i}: Movie " in both.text


def test_artifacts_replace_node_text(movies) -> None:
    artifacts = {0: AlignerArtifacts(0, "desc", "plain summary", "structural summary")}
    bundle = build_prediction_prompt(movies, 0, movies.classes, artifacts=artifacts)
    assert "Title and description: structural summary." in bundle.text


def test_missing_picture_is_a_node_error() -> None:
    nodes = [NodeRecord(id=0, text="a", label=0), NodeRecord(id=1, text="b", label=0)]
    graph = build_graph(nodes, [(0, 1)], ["Drama"], {"text": EmbeddingTable("text", np.eye(2))})
    with pytest.raises(MissingImage):
        build_prediction_prompt(graph, 0, ["Drama"])
    run = predict_nodes(MockVlmClient(default="Drama"), graph, [0, 1], ["Drama"])
    assert sorted(run.errors) == [0, 1]
    assert run.predictions == [-1, -1]


def test_in_context_exemplars_precede_the_target(movies) -> None:
    split = split_nodes(movies, seed=0)
    exemplars = select_exemplars(movies, split, 2)
    labels = [movies.nodes[e].label for e in exemplars]
    assert len(exemplars) == 2 and labels == sorted(set(labels))
    seen: list[str] = []

    def respond(bundle: PromptBundle) -> str:
        seen.append(bundle.text)
        return gold_responder(movies)(bundle)

    opts = PredictorSettings(icl_budget=2)
    run = predict_nodes(MockVlmClient(responder=respond), movies, split.test[:5], movies.classes, opts, split=split)
    assert run.accuracy == 1.0
    assert all(text.count("Assistant: ") == 2 for text in seen)
    with pytest.raises(ConfigInvalid):
        predict_nodes(MockVlmClient(), movies, [0], movies.classes, opts)


def test_sft_export_is_deterministic(movies, tmp_path: Path) -> None:
    split = split_nodes(movies, seed=1)
    opts = PredictorSettings(structure="text")
    first = tmp_path / "a.jsonl"
    second = tmp_path / "b.jsonl"
    assert export_sft_dataset(movies, split, opts, first) == len(split.train)
    export_sft_dataset(movies, split, opts, second)
    assert first.read_bytes() == second.read_bytes()
    records = [json.loads(line) for line in first.read_text(encoding="utf-8").splitlines()]
    assert [r["node_id"] for r in records] == sorted(split.train)
    record = records[0]
    label = movies.classes[movies.nodes[record["node_id"]].label]
    assert record["target"] == f"Assistant: {label}"
    assert record["messages"][1] == {"role": "assistant", "content": label}
    assert "Assistant:" not in record["messages"][0]["content"]
