from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from mmgbench.config import StructureSelectSpec
from mmgbench.embedding_io import EmbeddingTable, write_matrix
from mmgbench.errors import BadRatios, MalformedRecord, MissingEmbedding, ShapeMismatch, UnknownLabel
from mmgbench.graph import (
    NodeRecord,
    SplitAssignment,
    build_graph,
    hop_neighborhood,
    load_graph,
    sample_neighbors,
    split_nodes,
    top_k_similar_neighbors,
    write_graph_files,
)
from mmgbench.synthetic import two_cluster_graph, write_movies_fixture


def _graph(num_nodes: int, edges: list[tuple[int, int]], features: np.ndarray | None = None):
    nodes = [NodeRecord(id=i, text=f"n{i}", label=0) for i in range(num_nodes)]
    tables = {}
    if features is not None:
        tables["text"] = EmbeddingTable("text", features)
    return build_graph(nodes, edges, ["only"], tables)


def _random_graph(rng: np.random.Generator, num_nodes: int, p: float) -> list[tuple[int, int]]:
    return [(u, v) for u in range(num_nodes) for v in range(u + 1, num_nodes) if rng.random() < p]


def test_movies_fixture_round_trips_to_manifest_counts(tmp_path: Path) -> None:
    paths = write_movies_fixture(tmp_path / "movies", num_nodes=76)
    graph = load_graph(paths.nodes, paths.edges, paths.classes, paths.embeddings, domain="movies")
    manifest = json.loads(paths.manifest.read_text(encoding="utf-8"))
    assert graph.num_nodes == manifest["nodes"]
    assert graph.num_edges == manifest["edges"]
    assert graph.num_classes == manifest["classes"] == 19
    assert graph.report is not None
    assert graph.report.dropped_self_loops == 1
    assert graph.report.dropped_duplicates >= 2
    assert graph.nodes[3].image_path == paths.root / "images" / "3.png"
    assert graph.nodes[3].image_path.exists()


def test_edges_are_symmetric_without_self_loops() -> None:
    graph = _graph(4, [(0, 1), (1, 0), (2, 2), (2, 3), (3, 2)])
    dense = graph.adjacency.toarray()
    assert np.array_equal(dense, dense.T)
    assert np.all(np.diag(dense) == 0)
    assert graph.num_edges == 2
    assert graph.report is not None
    assert graph.report.dropped_self_loops == 1
    assert graph.report.dropped_duplicates == 2


def test_malformed_node_line_reports_path_and_line(tmp_path: Path) -> None:
    nodes = tmp_path / "nodes.jsonl"
    nodes.write_text('{"id": 0, "text": "a", "label": 0}\n{"id": 1, "text": "b"\n', encoding="utf-8")
    (tmp_path / "edges.txt").write_text("0,1\n", encoding="utf-8")
    (tmp_path / "classes.txt").write_text("x\n", encoding="utf-8")
    with pytest.raises(MalformedRecord) as info:
        load_graph(nodes, tmp_path / "edges.txt", tmp_path / "classes.txt")
    assert info.value.line == 2
    assert info.value.path == str(nodes)


def test_label_outside_class_vocabulary_is_rejected(tmp_path: Path) -> None:
    nodes = tmp_path / "nodes.jsonl"
    nodes.write_text('{"id": 0, "text": "a", "label": 3}\n', encoding="utf-8")
    (tmp_path / "edges.txt").write_text("", encoding="utf-8")
    (tmp_path / "classes.txt").write_text("x\ny\n", encoding="utf-8")
    with pytest.raises(UnknownLabel):
        load_graph(nodes, tmp_path / "edges.txt", tmp_path / "classes.txt")


def test_short_text_table_raises_missing_embedding(tmp_path: Path) -> None:
    nodes = tmp_path / "nodes.jsonl"
    nodes.write_text(
        "".join(json.dumps({"id": i, "text": f"t{i}", "label": 0}) + "\n" for i in range(3)), encoding="utf-8"
    )
    (tmp_path / "edges.txt").write_text("0,1\n", encoding="utf-8")
    (tmp_path / "classes.txt").write_text("x\n", encoding="utf-8")
    write_matrix(np.ones((2, 4)), tmp_path / "text.emb")
    with pytest.raises(MissingEmbedding):
        load_graph(nodes, tmp_path / "edges.txt", tmp_path / "classes.txt", {"text": tmp_path / "text.emb"})


def test_missing_image_row_raises_missing_embedding() -> None:
    nodes = [NodeRecord(id=0, text="a", label=0, image_row=5)]
    tables = {"text": EmbeddingTable("text", np.ones((1, 2))), "image": EmbeddingTable("image", np.ones((2, 2)))}
    with pytest.raises(MissingEmbedding):
        build_graph(nodes, [], ["x"], tables)


def test_write_graph_files_reloads_identically(tmp_path: Path) -> None:
    graph = two_cluster_graph(40, seed=2)
    paths = write_graph_files(graph, tmp_path / "copy")
    reloaded = load_graph(
        paths["nodes"], paths["edges"], paths["classes"], {"text": paths["text"], "image": paths["image"]}
    )
    assert (reloaded.adjacency != graph.adjacency).nnz == 0
    assert reloaded.classes == graph.classes
    assert np.array_equal(reloaded.labels, graph.labels)
    assert np.array_equal(reloaded.modality_tables["image"].data, graph.modality_tables["image"].data)


def test_split_sizes_follow_ratios_for_random_sizes() -> None:
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(5, 500))
        seed = int(rng.integers(0, 10_000))
        split = split_nodes(n, (0.6, 0.2, 0.2), seed)
        assert abs(len(split.train) - 0.6 * n) <= 1
        assert abs(len(split.val) - 0.2 * n) <= 1
        assert abs(len(split.test) - 0.2 * n) <= 1
        together = set(split.train) | set(split.val) | set(split.test)
        assert together == set(range(n))
        assert len(split.train) + len(split.val) + len(split.test) == n


def test_split_is_deterministic_and_serializes(tmp_path: Path) -> None:
    first = split_nodes(100, seed=4)
    assert first == split_nodes(100, seed=4)
    assert first != split_nodes(100, seed=5)
    path = first.save(tmp_path / "split.json")
    assert SplitAssignment.load(path) == first


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.6, 0.4), (-0.2, 0.6, 0.6)])
def test_bad_ratios_are_rejected(ratios: tuple[float, ...]) -> None:
    with pytest.raises(BadRatios):
        split_nodes(10, ratios)


def test_hop_neighborhood_on_a_path() -> None:
    graph = _graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    assert hop_neighborhood(graph, 0, 1) == [1]
    assert hop_neighborhood(graph, 0, 2) == [1, 2]
    assert hop_neighborhood(graph, 2, 2) == [0, 1, 3, 4]
    assert hop_neighborhood(_graph(2, []), 0, 3) == []


def test_sample_neighbors_draws_without_replacement() -> None:
    graph = _graph(8, [(0, v) for v in range(1, 8)])
    drawn = sample_neighbors(graph, 0, 5, seed=3)
    assert len(drawn) == len(set(drawn)) == 5
    assert set(drawn) <= set(range(1, 8))
    assert drawn == sample_neighbors(graph, 0, 5, seed=3)
    assert sorted(sample_neighbors(graph, 1, 5, seed=0)) == [0]
    assert sample_neighbors(_graph(2, []), 0, 5) == []


def _exhaustive_top_k(graph, v: int, features: np.ndarray, k: int, h: int) -> list[int]:
    anchor = features[v].astype(np.float64)
    scored = []
    for u in hop_neighborhood(graph, v, h):
        row = features[u].astype(np.float64)
        denom = np.linalg.norm(row) * np.linalg.norm(anchor)
        sim = float(row @ anchor / denom) if denom > 0 else 0.0
        scored.append((-sim, u))
    return [u for _, u in sorted(scored)[:k]]


def test_top_k_matches_exhaustive_ranking_on_random_graphs() -> None:
    rng = np.random.default_rng(0)
    spec = StructureSelectSpec()
    for trial in range(100):
        n = int(rng.integers(2, 30))
        edges = _random_graph(rng, n, 0.25)
        if trial % 2:
            # small integer features produce exact ties
            features = rng.integers(-1, 2, size=(n, 3)).astype(np.float32)
        else:
            features = rng.normal(size=(n, 4)).astype(np.float32)
        graph = _graph(n, edges, features)
        for v in range(n):
            expected = _exhaustive_top_k(graph, v, features, spec.k, spec.h)
            assert top_k_similar_neighbors(graph, v, spec, features) == expected


def test_top_k_breaks_ties_by_ascending_id_and_respects_hops() -> None:
    features = np.ones((5, 2), dtype=np.float32)
    graph = _graph(5, [(0, 4), (0, 3), (0, 2), (2, 1)], features)
    assert top_k_similar_neighbors(graph, 0, StructureSelectSpec(k=2, h=1), features) == [2, 3]
    assert top_k_similar_neighbors(graph, 0, StructureSelectSpec(k=5, h=2), features) == [1, 2, 3, 4]


def test_top_k_needs_row_aligned_features() -> None:
    graph = _graph(3, [(0, 1)])
    with pytest.raises(ShapeMismatch):
        top_k_similar_neighbors(graph, 0, StructureSelectSpec(), np.ones((2, 2)))
    with pytest.raises(ShapeMismatch):
        top_k_similar_neighbors(graph, 0, StructureSelectSpec(), None)
