from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from mmgbench.config import StructureSelectSpec
from mmgbench.embedding_io import read_matrix
from mmgbench.errors import ConfigInvalid, EmptyInput, ModalityUnavailable, ShapeMismatch
from mmgbench.graph import load_graph, top_k_similar_neighbors
from mmgbench.synthetic import two_cluster_graph, write_movies_fixture
from mmgbench.tokens import (
    TokenDirectory,
    TokenProjector,
    assemble_structure_tokens,
    export_structure_tokens,
    neighbor_text_token,
    neighbor_visual_token,
    project_to_token_space,
)


class MemoryTokens:
    def __init__(self, num_nodes: int, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.tokens = {
            (v, modality): rng.normal(size=(int(rng.integers(1, 5)), 6)).astype(np.float32)
            for v in range(num_nodes)
            for modality in ("image", "text")
        }

    def load(self, node_id: int, modality: str) -> np.ndarray:
        return self.tokens[(node_id, modality)]


def test_projection_maps_rows_into_token_space() -> None:
    proj = TokenProjector.initialize(4, 7, seed=2)
    h = np.arange(8, dtype=np.float32).reshape(2, 4)
    z = project_to_token_space(h, proj)
    assert z.shape == (2, 7) and z.dtype == np.float32
    assert np.allclose(project_to_token_space(h[0], proj), z[0], atol=1e-5)
    with pytest.raises(ShapeMismatch):
        project_to_token_space(np.ones(3), proj)


def test_pooling_averages_rows() -> None:
    row = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(neighbor_visual_token(row), row[0].astype(np.float32))
    assert np.allclose(neighbor_text_token(np.vstack([row, -row])), 0.0)
    with pytest.raises(EmptyInput):
        neighbor_visual_token(np.empty((0, 3)))
    with pytest.raises(ShapeMismatch):
        neighbor_text_token(np.ones(3))


def test_blocks_follow_top_k_order_with_one_token_per_neighbor() -> None:
    spec = StructureSelectSpec(k=3, h=1, similarity_features="text")
    for seed in range(10):
        graph = two_cluster_graph(30, p_in=0.3, p_out=0.05, seed=seed)
        sources = MemoryTokens(30, seed=seed)
        features = graph.modality_tables["text"].data
        for v in range(graph.num_nodes):
            block = assemble_structure_tokens(graph, v, spec, "both", sources)
            expected = top_k_similar_neighbors(graph, v, spec, features)
            assert list(block.neighbor_ids) == expected
            if not expected:
                assert block.empty and block.visual_tokens is None and block.text_tokens is None
                continue
            assert block.visual_tokens is not None and block.text_tokens is not None
            for row, u in enumerate(expected):
                assert np.allclose(block.visual_tokens[row], sources.tokens[(u, "image")].mean(axis=0))
                assert np.allclose(block.text_tokens[row], sources.tokens[(u, "text")].mean(axis=0))


def test_neighborhood_pooling_collapses_visual_tokens() -> None:
    graph = two_cluster_graph(20, p_in=0.5, seed=1)
    sources = MemoryTokens(20, seed=1)
    v = int(np.argmax(np.asarray(graph.adjacency.sum(axis=1)).reshape(-1)))
    block = assemble_structure_tokens(graph, v, StructureSelectSpec(), "image", sources, pooling="neighborhood")
    assert block.visual_tokens is not None and block.visual_tokens.shape == (1, 6)
    patches = np.vstack([sources.tokens[(u, "image")] for u in block.neighbor_ids])
    assert np.allclose(block.visual_tokens[0], patches.mean(axis=0), atol=1e-6)
    assert block.text_tokens is None
    with pytest.raises(ConfigInvalid):
        assemble_structure_tokens(graph, v, None, "audio", sources)
    with pytest.raises(ConfigInvalid):
        assemble_structure_tokens(graph, v, None, "image", sources, pooling="max")


def test_export_reads_token_directory_and_writes_manifest(tmp_path: Path) -> None:
    paths = write_movies_fixture(tmp_path / "movies", num_nodes=40)
    graph = load_graph(paths.nodes, paths.edges, paths.classes, paths.embeddings)
    assert paths.token_dir is not None
    manifest_path = export_structure_tokens(
        graph, range(10), StructureSelectSpec(), "both", TokenDirectory(paths.token_dir), tmp_path / "out"
    )
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    assert manifest["k"] == 3 and manifest["pooling"] == "per_neighbor"
    for v in range(10):
        entry = manifest["nodes"][str(v)]
        if entry["neighbors"]:
            visual = read_matrix(tmp_path / "out" / entry["visual"])
            assert visual.shape[0] == len(entry["neighbors"])


def test_missing_token_file_is_unavailable(tmp_path: Path) -> None:
    with pytest.raises(ModalityUnavailable):
        TokenDirectory(tmp_path).load(0, "image")
