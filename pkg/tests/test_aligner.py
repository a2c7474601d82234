from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mmgbench.aligner import (
    AlignerArtifacts,
    ArtifactStore,
    generate_image_description,
    latent_align_features,
    run_alignment,
    structural_neighbors,
    summarize_multimodal,
)
from mmgbench.embedding_io import EmbeddingTable
from mmgbench.errors import MissingDescription, NoImage, ValidationError
from mmgbench.graph import NodeRecord, build_graph
from mmgbench.synthetic import write_png
from mmgbench.vlm_client import ImageSegment, MockVlmClient, PromptBundle


def _star_graph(tmp_path: Path):
    """Node 0 joined to 1..3; node 3 has no image."""
    tmp_path.mkdir(parents=True, exist_ok=True)
    nodes = []
    for i in range(4):
        path = None
        if i != 3:
            path = tmp_path / f"{i}.png"
            write_png(path, (40 * i, 0, 0), size=4)
        nodes.append(NodeRecord(id=i, text=f"item {i}", label=0, image_row=i, image_path=path))
    tables = {"text": EmbeddingTable("text", np.eye(4)), "image": EmbeddingTable("image", np.eye(4)[:, :2])}
    return build_graph(nodes, [(0, 1), (0, 2), (0, 3)], ["only"], tables)


class RecordingResponder:
    def __init__(self) -> None:
        self.structural_prompts: list[str] = []

    def __call__(self, bundle: PromptBundle) -> str:
        images = [s for s in bundle.segments if isinstance(s, ImageSegment)]
        if images:
            assert images[0].path is not None
            return f"desc {images[0].path.stem}"
        if "co-purchased" in bundle.text:
            self.structural_prompts.append(bundle.text)
            return "structural summary"
        return "plain summary"


def test_image_description_needs_an_image(tmp_path: Path) -> None:
    graph = _star_graph(tmp_path)
    client = MockVlmClient(responder=RecordingResponder())
    assert generate_image_description(client, graph, 1) == "desc 1"
    with pytest.raises(NoImage):
        generate_image_description(client, graph, 3)


def test_summary_needs_a_description(tmp_path: Path) -> None:
    graph = _star_graph(tmp_path)
    with pytest.raises(MissingDescription):
        summarize_multimodal(MockVlmClient(), graph, 0, descriptions={})


def test_structural_neighbors_skip_nodes_without_descriptions(tmp_path: Path) -> None:
    graph = _star_graph(tmp_path)
    descriptions = {0: "d0", 1: "d1", 2: "d2"}
    assert structural_neighbors(graph, 0, descriptions) == [1, 2]
    assert structural_neighbors(graph, 0, descriptions, neighbor_count=1, seed=4) == structural_neighbors(
        graph, 0, descriptions, neighbor_count=1, seed=4
    )


def test_run_alignment_keeps_per_node_failures(tmp_path: Path) -> None:
    graph = _star_graph(tmp_path / "images")
    responder = RecordingResponder()
    store = ArtifactStore(tmp_path / "artifacts")
    run = run_alignment(MockVlmClient(responder=responder), graph, range(4), store, structural=True)

    assert sorted(run.artifacts) == [0, 1, 2, 3]
    assert run.described == 3
    assert "NoImage" in run.errors[3]
    assert run.artifacts[3] == AlignerArtifacts(node_id=3)
    assert run.artifacts[0] == AlignerArtifacts(0, "desc 0", "plain summary", "structural summary")
    center_prompt = next(p for p in responder.structural_prompts if "dataset: item 0." in p)
    assert "text information: item 1; item 2, image summary: desc 1; desc 2" in center_prompt
    assert store.load_all() == run.artifacts


def test_structural_prompt_falls_back_without_described_neighbors(tmp_path: Path) -> None:
    graph = _star_graph(tmp_path)
    responder = RecordingResponder()
    summarize_multimodal(MockVlmClient(responder=responder), graph, 1, True, descriptions={1: "desc 1"})
    assert "No co-purchased or co-reviewed product information is available." in responder.structural_prompts[0]


def test_artifact_files_are_written_once(tmp_path: Path) -> None:
    store = ArtifactStore(tmp_path)
    path = store.put(AlignerArtifacts(7, "first", "s"), "a" * 64)
    store.put(AlignerArtifacts(7, "second", "s"), "a" * 64)
    assert path.name == "00000007-aaaaaaaaaaaaaaaa.json"
    assert store.get(7, "a" * 64) == AlignerArtifacts(7, "first", "s")
    assert "t_ss" not in path.read_text(encoding="utf-8")


def test_summary_without_description_is_invalid() -> None:
    with pytest.raises(ValidationError):
        AlignerArtifacts(node_id=0, t_s="summary")


def test_latent_alignment_concatenates_modalities(tmp_path: Path) -> None:
    graph = _star_graph(tmp_path)
    assert latent_align_features(graph).shape == (4, 6)
