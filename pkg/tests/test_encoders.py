from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mmgbench.config import ContrastiveConfig, EncoderSettings
from mmgbench.embedding_io import EmbeddingTable
from mmgbench.encoders import (
    ProjectionHeads,
    clip_align_loss,
    encode_features,
    fuse_features,
    load_heads,
    modality_matrix,
    save_heads,
    structure_contrastive_loss,
    train_finetuned_encoder,
    train_structure_aware_encoder,
)
from mmgbench.errors import ConfigInvalid, DegenerateBatch, EmptyTrainSet, ModalityUnavailable
from mmgbench.graph import MultimodalGraph, NodeRecord, build_graph
from mmgbench.numerics import finite_difference_gradient
from mmgbench.synthetic import two_block_graph


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def direct_structure_loss(anchors: np.ndarray, positives: np.ndarray, tau: float) -> float:
    """Term-by-term evaluation with python loops."""

    def cos(u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    total = 0.0
    for i in range(anchors.shape[0]):
        numerator = np.exp(cos(anchors[i], positives[i]) / tau)
        denominator = sum(np.exp(cos(anchors[i], anchors[k]) / tau) for k in range(anchors.shape[0]))
        total += -np.log(numerator / denominator)
    return total / anchors.shape[0]


def test_structure_loss_equals_direct_evaluation() -> None:
    rng = np.random.default_rng(0)
    for _ in range(50):
        anchors = rng.normal(size=(16, 8))
        positives = rng.normal(size=(16, 8))
        loss, _ = structure_contrastive_loss(anchors, positives, 0.5)
        assert abs(loss - direct_structure_loss(anchors, positives, 0.5)) < 1e-6


def test_structure_loss_gradients_match_finite_differences() -> None:
    rng = np.random.default_rng(1)
    for _ in range(20):
        b, d = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        anchors, positives = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        _, (d_anchor, d_pos) = structure_contrastive_loss(anchors, positives, 0.5)
        fd_anchor = finite_difference_gradient(lambda a: structure_contrastive_loss(a, positives, 0.5)[0], anchors)
        fd_pos = finite_difference_gradient(lambda p: structure_contrastive_loss(anchors, p, 0.5)[0], positives)
        assert relative_error(d_anchor, fd_anchor) < 1e-3
        assert relative_error(d_pos, fd_pos) < 1e-3


def test_clip_loss_gradients_match_finite_differences() -> None:
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        text, image = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        _, (d_text, d_image) = clip_align_loss(text, image, 0.5)
        fd_text = finite_difference_gradient(lambda t: clip_align_loss(t, image, 0.5)[0], text)
        fd_image = finite_difference_gradient(lambda v: clip_align_loss(text, v, 0.5)[0], image)
        assert relative_error(d_text, fd_text) < 1e-3
        assert relative_error(d_image, fd_image) < 1e-3


def test_clip_loss_is_low_for_aligned_pairs() -> None:
    eye = np.eye(4)
    aligned, _ = clip_align_loss(eye, eye, 0.1)
    shuffled, _ = clip_align_loss(eye, eye[[1, 2, 3, 0]], 0.1)
    assert aligned < shuffled
    with pytest.raises(DegenerateBatch):
        clip_align_loss(np.ones((1, 3)), np.ones((1, 3)), 0.5)


def test_single_row_contrastive_batch_is_rejected_by_config() -> None:
    with pytest.raises(DegenerateBatch):
        ContrastiveConfig(batch_size=1).validate()


def _paired_graph(num_nodes: int, seed: int):
    rng = np.random.default_rng(seed)
    latent = rng.normal(size=(num_nodes, 8))
    rotate_text, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    rotate_image, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    text = latent @ rotate_text + 0.1 * rng.normal(size=(num_nodes, 8))
    image = latent @ rotate_image + 0.1 * rng.normal(size=(num_nodes, 8))
    nodes = [NodeRecord(id=i, text=f"n{i}", label=0, image_row=i) for i in range(num_nodes)]
    tables = {"text": EmbeddingTable("text", text), "image": EmbeddingTable("image", image)}
    return build_graph(nodes, [(i, i + 1) for i in range(num_nodes - 1)], ["only"], tables)


def test_finetuned_encoder_raises_diagonal_pair_cosine() -> None:
    graph = _paired_graph(64, seed=3)
    _, report = train_finetuned_encoder(graph, ContrastiveConfig(lr=1e-2, epochs=30, seed=3))
    assert report.steps == 30 * 4
    assert report.cosine_after > report.cosine_before + 0.1


def _wide_two_block(seed: int) -> MultimodalGraph:
    # embedding width and node count set how far default-lr Adam steps can move the heads
    return two_block_graph(1024, d_text=512, d_image=512, p_in=0.005, p_out=0.0001, seed=seed)


def test_structure_aware_training_at_default_settings_raises_neighbor_cosine() -> None:
    gains = []
    for seed in range(3):
        graph = _wide_two_block(seed)
        _, report = train_structure_aware_encoder(graph, ContrastiveConfig(seed=seed))
        anchors = graph.num_nodes - report.skipped_anchors
        assert report.steps == -(-anchors // 16)
        assert len(report.loss_curve) == report.steps
        gains.append(report.cosine_after - report.cosine_before)
    assert np.mean(gains) >= 0.01


def test_structure_aware_training_needs_an_edge() -> None:
    nodes = [NodeRecord(id=i, text="t", label=0, image_row=i) for i in range(3)]
    tables = {"text": EmbeddingTable("text", np.eye(3)), "image": EmbeddingTable("image", np.eye(3))}
    graph = build_graph(nodes, [], ["only"], tables)
    with pytest.raises(EmptyTrainSet):
        train_structure_aware_encoder(graph)


def test_fusion_modes_and_zero_filled_images() -> None:
    nodes = [
        NodeRecord(id=0, text="a", label=0, image_row=0),
        NodeRecord(id=1, text="b", label=0),
    ]
    tables = {"text": EmbeddingTable("text", np.ones((2, 3))), "image": EmbeddingTable("image", np.full((1, 2), 2.0))}
    graph = build_graph(nodes, [(0, 1)], ["only"], tables)
    assert fuse_features(graph, "text_only").shape == (2, 3)
    assert fuse_features(graph, "image_only").shape == (2, 2)
    concat = fuse_features(graph, "concat")
    assert concat.shape == (2, 5)
    assert np.array_equal(modality_matrix(graph, "image")[1], np.zeros(2))
    with pytest.raises(ConfigInvalid):
        fuse_features(graph, "sum")


def test_concat_without_images_is_unavailable() -> None:
    nodes = [NodeRecord(id=0, text="a", label=0)]
    graph = build_graph(nodes, [], ["only"], {"text": EmbeddingTable("text", np.ones((1, 3)))})
    with pytest.raises(ModalityUnavailable):
        fuse_features(graph, "concat")


def test_encode_features_variants(tmp_path: Path) -> None:
    graph = two_block_graph(16, d_text=6, d_image=4, seed=0)
    features, heads, report = encode_features(graph, EncoderSettings())
    assert features.shape == (32, 10) and heads is None and report is None
    settings = EncoderSettings(variant="structure_aware", contrastive=ContrastiveConfig(batch_size=8))
    features, heads, report = encode_features(graph, settings)
    assert heads is not None and report is not None
    assert features.shape == (32, 8)
    assert report.variant == "structure_aware"
    save_heads(heads, tmp_path / "heads", config=settings.contrastive)
    loaded = load_heads(tmp_path / "heads")
    assert np.array_equal(loaded.w_text.value, heads.w_text.value)
    assert np.array_equal(loaded.w_image.value, heads.w_image.value)
    assert loaded.d_proj == heads.d_proj == 4


def test_projection_heads_need_matching_widths() -> None:
    heads = ProjectionHeads.initialize(6, 4, seed=1)
    assert heads.w_text.shape == (6, 4)
    assert heads.w_image.shape == (4, 4)
    assert np.array_equal(heads.w_text.value, ProjectionHeads.initialize(6, 4, seed=1).w_text.value)
