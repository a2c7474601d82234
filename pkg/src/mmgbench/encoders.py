"""Encoder-side feature learning: modality fusion and contrastive projection heads.

Precomputed text/image embeddings stay frozen; training only moves one linear
projection per modality. Two objectives are available: a symmetric CLIP-style
alignment loss over each node's own (text, image) pair, and a structure-aware
loss whose positive is a sampled hop-1 neighbor and whose negatives are the
other anchors of the batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from mmgbench.config import FUSION_MODES, ContrastiveConfig, EncoderSettings, dataclass_to_dict
from mmgbench.errors import (
    ConfigInvalid,
    DegenerateBatch,
    EmptyTrainSet,
    ModalityUnavailable,
    ShapeMismatch,
)
from mmgbench.graph import MultimodalGraph, sample_neighbors
from mmgbench.numerics import (
    Parameter,
    adam_step,
    as_matrix,
    l2_normalize,
    l2_normalize_backward,
    load_tensor,
    logsumexp,
    result_dtype,
    save_tensor,
    softmax,
    uniform_init,
)

logger = logging.getLogger(__name__)


@dataclass(slots=True, frozen=True)
class FusionSpec:
    mode: str = "concat"

    def __post_init__(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ConfigInvalid(f"unknown fusion mode {self.mode!r}; expected one of {FUSION_MODES}")


@dataclass(slots=True)
class ProjectionHeads:
    w_text: Parameter
    w_image: Parameter
    seed: int = 0

    def __post_init__(self) -> None:
        if self.w_text.shape[1] != self.w_image.shape[1]:
            raise ShapeMismatch(
                f"projection output dims differ: {self.w_text.shape[1]} vs {self.w_image.shape[1]}"
            )

    @classmethod
    def initialize(cls, d_text: int, d_image: int, d_proj: int | None = None, *, seed: int = 0) -> ProjectionHeads:
        rng = np.random.default_rng(seed)
        width = d_proj if d_proj is not None else min(d_text, d_image)
        return cls(
            w_text=Parameter(uniform_init(rng, d_text, width)),
            w_image=Parameter(uniform_init(rng, d_image, width)),
            seed=seed,
        )

    @property
    def d_proj(self) -> int:
        return int(self.w_text.shape[1])

    def parameters(self) -> list[Parameter]:
        return [self.w_text, self.w_image]

    def weight(self, modality: str) -> np.ndarray:
        if modality == "text":
            return self.w_text.value
        if modality == "image":
            return self.w_image.value
        raise ModalityUnavailable(f"no projection head for modality {modality!r}")


@dataclass(slots=True)
class EncoderReport:
    variant: str
    loss_curve: list[float] = field(default_factory=list)
    cosine_before: float = 0.0
    cosine_after: float = 0.0
    skipped_anchors: int = 0
    zero_filled_rows: int = 0
    steps: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def zero_filled_rows(graph: MultimodalGraph, modality: str) -> int:
    if modality == "text":
        return 0
    return int(np.count_nonzero(graph.modality_rows(modality) < 0))


def modality_matrix(graph: MultimodalGraph, modality: str) -> np.ndarray:
    """|V| x d matrix for one modality; nodes without a row are zero-filled."""
    table = graph.modality_tables.get(modality)
    if table is None:
        raise ModalityUnavailable(f"graph has no {modality} embedding table")
    rows = graph.modality_rows(modality)
    out = np.zeros((graph.num_nodes, table.dim), dtype=np.float32)
    present = rows >= 0
    out[present] = table.data[rows[present]]
    missing = graph.num_nodes - int(np.count_nonzero(present))
    if missing:
        logger.debug("zero-filled rows", extra={"modality": modality, "zero_filled": missing})
    return out


def project_modality(x: np.ndarray, heads: ProjectionHeads | None, modality: str) -> np.ndarray:
    if heads is None:
        return np.asarray(x, dtype=np.float32)
    w = heads.weight(modality)
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"{modality} features have dim {x.shape[1]}, head expects {w.shape[0]}")
    return (np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64)).astype(np.float32)


def fuse_features(
    graph: MultimodalGraph,
    spec: FusionSpec | str = "concat",
    heads: ProjectionHeads | None = None,
) -> np.ndarray:
    mode = spec.mode if isinstance(spec, FusionSpec) else FusionSpec(spec).mode
    if mode == "text_only":
        return project_modality(modality_matrix(graph, "text"), heads, "text")
    if mode == "image_only":
        return project_modality(modality_matrix(graph, "image"), heads, "image")
    missing = [tag for tag in ("text", "image") if not graph.has_modality(tag)]
    if missing:
        raise ModalityUnavailable(f"concat fusion needs both modalities; missing {missing}")
    return np.hstack(
        (
            project_modality(modality_matrix(graph, "text"), heads, "text"),
            project_modality(modality_matrix(graph, "image"), heads, "image"),
        )
    )


def structure_features(graph: MultimodalGraph, heads: ProjectionHeads) -> np.ndarray:
    """Projected fused text-image embedding for every node."""
    return fuse_features(graph, "concat", heads)


def selection_features(
    graph: MultimodalGraph, tag: str, heads: ProjectionHeads | None = None
) -> np.ndarray:
    if tag == "text":
        return fuse_features(graph, "text_only", heads)
    if tag == "image":
        return fuse_features(graph, "image_only", heads)
    if tag == "fused":
        return fuse_features(graph, "concat", heads)
    raise ConfigInvalid(f"unknown similarity features {tag!r}")


def clip_align_loss(
    text_batch: np.ndarray, image_batch: np.ndarray, tau: float
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Symmetric InfoNCE over row-aligned pairs; returns (loss, (d_text, d_image))."""
    text_batch = as_matrix(text_batch, "text_batch")
    image_batch = as_matrix(image_batch, "image_batch")
    if text_batch.shape != image_batch.shape:
        raise ShapeMismatch(f"batches must align, got {text_batch.shape} and {image_batch.shape}")
    n = text_batch.shape[0]
    if n < 2:
        raise DegenerateBatch(f"contrastive alignment needs at least 2 rows, got {n}")
    dtype = result_dtype(text_batch, image_batch)
    t_hat = np.asarray(l2_normalize(np.asarray(text_batch, dtype=np.float64)))
    v_hat = np.asarray(l2_normalize(np.asarray(image_batch, dtype=np.float64)))
    scaled = (t_hat @ v_hat.T) / tau
    diagonal = np.diag(scaled)
    row_loss = np.mean(logsumexp(scaled, axis=1) - diagonal)
    col_loss = np.mean(logsumexp(scaled, axis=0) - diagonal)
    loss = 0.5 * float(row_loss + col_loss)

    eye = np.eye(n)
    p_row = np.asarray(softmax(scaled, axis=1), dtype=np.float64)
    p_col = np.asarray(softmax(scaled, axis=0), dtype=np.float64)
    d_sim = 0.5 * ((p_row - eye) + (p_col - eye)) / (n * tau)
    d_t_hat = d_sim @ v_hat
    d_v_hat = d_sim.T @ t_hat
    d_text = l2_normalize_backward(np.asarray(text_batch, dtype=np.float64), d_t_hat)
    d_image = l2_normalize_backward(np.asarray(image_batch, dtype=np.float64), d_v_hat)
    return loss, (d_text.astype(dtype), d_image.astype(dtype))


def structure_contrastive_loss(
    anchor_embs: np.ndarray, pos_embs: np.ndarray, tau: float
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Mean over anchors of -log(exp(s(a_i,p_i)/tau) / sum_k exp(s(a_i,a_k)/tau)).

    The denominator runs over every anchor in the batch, the anchor itself included.
    """
    anchor_embs = as_matrix(anchor_embs, "anchor_embs")
    pos_embs = as_matrix(pos_embs, "pos_embs")
    if anchor_embs.shape != pos_embs.shape:
        raise ShapeMismatch(f"anchor/positive shapes differ: {anchor_embs.shape} vs {pos_embs.shape}")
    batch = anchor_embs.shape[0]
    if batch < 1:
        raise DegenerateBatch("structure contrastive loss needs at least one anchor")
    dtype = result_dtype(anchor_embs, pos_embs)
    anchors = np.asarray(anchor_embs, dtype=np.float64)
    positives = np.asarray(pos_embs, dtype=np.float64)
    a_hat = np.asarray(l2_normalize(anchors))
    p_hat = np.asarray(l2_normalize(positives))
    scaled = (a_hat @ a_hat.T) / tau
    positive_term = np.sum(a_hat * p_hat, axis=1) / tau
    loss = float(np.mean(logsumexp(scaled, axis=1) - positive_term))

    weights = np.asarray(softmax(scaled, axis=1), dtype=np.float64) / (batch * tau)
    d_a_hat = (weights + weights.T) @ a_hat - p_hat / (tau * batch)
    d_p_hat = -a_hat / (tau * batch)
    d_anchor = l2_normalize_backward(anchors, d_a_hat)
    d_pos = l2_normalize_backward(positives, d_p_hat)
    return loss, (d_anchor.astype(dtype), d_pos.astype(dtype))


def mean_pair_cosine(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"row-paired matrices differ: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        return 0.0
    a_hat = np.asarray(l2_normalize(np.asarray(a, dtype=np.float64)))
    b_hat = np.asarray(l2_normalize(np.asarray(b, dtype=np.float64)))
    return float(np.mean(np.sum(a_hat * b_hat, axis=1)))


def mean_neighbor_cosine(features: np.ndarray, graph: MultimodalGraph) -> float:
    """Mean cosine over undirected edges."""
    upper = graph.adjacency.tocoo()
    keep = upper.row < upper.col
    return mean_pair_cosine(features[upper.row[keep]], features[upper.col[keep]])


def _require_both(graph: MultimodalGraph) -> tuple[np.ndarray, np.ndarray]:
    missing = [tag for tag in ("text", "image") if not graph.has_modality(tag)]
    if missing:
        raise ModalityUnavailable(f"contrastive training needs both modalities; missing {missing}")
    return modality_matrix(graph, "text"), modality_matrix(graph, "image")


def _project_pair(
    heads: ProjectionHeads, x_text: np.ndarray, x_image: np.ndarray
) -> np.ndarray:
    return np.hstack(
        (
            np.asarray(x_text, dtype=np.float64) @ np.asarray(heads.w_text.value, dtype=np.float64),
            np.asarray(x_image, dtype=np.float64) @ np.asarray(heads.w_image.value, dtype=np.float64),
        )
    )


def _accumulate_pair(
    heads: ProjectionHeads, x_text: np.ndarray, x_image: np.ndarray, grad: np.ndarray
) -> None:
    width = heads.d_proj
    heads.w_text.accumulate(np.asarray(x_text, dtype=np.float64).T @ grad[:, :width])
    heads.w_image.accumulate(np.asarray(x_image, dtype=np.float64).T @ grad[:, width:])


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[start : start + size] for start in range(0, order.size, size)]


def train_structure_aware_encoder(
    graph: MultimodalGraph,
    cfg: ContrastiveConfig | None = None,
    heads: ProjectionHeads | None = None,
) -> tuple[ProjectionHeads, EncoderReport]:
    cfg = cfg or ContrastiveConfig()
    cfg.validate()
    x_text, x_image = _require_both(graph)
    anchors = np.flatnonzero(graph.degrees() > 0)
    if anchors.size == 0:
        raise EmptyTrainSet("no node has a hop-1 neighbor to use as a positive")
    heads = heads or ProjectionHeads.initialize(x_text.shape[1], x_image.shape[1], cfg.d_proj, seed=cfg.seed)
    optim = cfg.optim()
    rng = np.random.default_rng(cfg.seed)
    report = EncoderReport(
        variant="structure_aware",
        skipped_anchors=graph.num_nodes - int(anchors.size),
        zero_filled_rows=zero_filled_rows(graph, "image"),
        cosine_before=mean_neighbor_cosine(structure_features(graph, heads), graph),
    )

    for epoch in range(cfg.epochs):
        positives = np.empty_like(anchors)
        for index, v in enumerate(anchors):
            drawn = sample_neighbors(graph, int(v), cfg.m, rng)
            positives[index] = drawn[int(rng.integers(len(drawn)))]
        order = rng.permutation(anchors.size)
        epoch_losses: list[float] = []
        for batch in _batches(order, cfg.batch_size):
            a_ids, p_ids = anchors[batch], positives[batch]
            a_emb = _project_pair(heads, x_text[a_ids], x_image[a_ids])
            p_emb = _project_pair(heads, x_text[p_ids], x_image[p_ids])
            loss, (d_anchor, d_pos) = structure_contrastive_loss(a_emb, p_emb, cfg.tau)
            _accumulate_pair(heads, x_text[a_ids], x_image[a_ids], d_anchor)
            _accumulate_pair(heads, x_text[p_ids], x_image[p_ids], d_pos)
            adam_step(heads.parameters(), optim)
            report.loss_curve.append(loss)
            report.steps += 1
            epoch_losses.append(loss)
        logger.info(
            "structure-aware epoch",
            extra={"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)), "batches": len(epoch_losses)},
        )

    report.cosine_after = mean_neighbor_cosine(structure_features(graph, heads), graph)
    return heads, report


def train_finetuned_encoder(
    graph: MultimodalGraph,
    cfg: ContrastiveConfig | None = None,
    heads: ProjectionHeads | None = None,
) -> tuple[ProjectionHeads, EncoderReport]:
    """CLIP-style alignment of each node's own text and image embeddings; no structure."""
    cfg = cfg or ContrastiveConfig()
    cfg.validate()
    x_text, x_image = _require_both(graph)
    paired = np.flatnonzero(graph.modality_rows("image") >= 0)
    heads = heads or ProjectionHeads.initialize(x_text.shape[1], x_image.shape[1], cfg.d_proj, seed=cfg.seed)
    optim = cfg.optim()
    rng = np.random.default_rng(cfg.seed)

    def pair_cosine() -> float:
        return mean_pair_cosine(
            project_modality(x_text[paired], heads, "text"),
            project_modality(x_image[paired], heads, "image"),
        )

    report = EncoderReport(
        variant="finetuned",
        skipped_anchors=graph.num_nodes - int(paired.size),
        zero_filled_rows=zero_filled_rows(graph, "image"),
        cosine_before=pair_cosine(),
    )
    for epoch in range(cfg.epochs):
        epoch_losses: list[float] = []
        for batch in _batches(paired[rng.permutation(paired.size)], cfg.batch_size):
            if batch.size < 2 <= cfg.batch_size:
                continue
            t_proj = np.asarray(x_text[batch], dtype=np.float64) @ np.asarray(heads.w_text.value, dtype=np.float64)
            v_proj = np.asarray(x_image[batch], dtype=np.float64) @ np.asarray(heads.w_image.value, dtype=np.float64)
            loss, (d_text, d_image) = clip_align_loss(t_proj, v_proj, cfg.tau)
            heads.w_text.accumulate(np.asarray(x_text[batch], dtype=np.float64).T @ d_text)
            heads.w_image.accumulate(np.asarray(x_image[batch], dtype=np.float64).T @ d_image)
            adam_step(heads.parameters(), optim)
            report.loss_curve.append(loss)
            report.steps += 1
            epoch_losses.append(loss)
        logger.info(
            "alignment epoch",
            extra={"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)) if epoch_losses else None},
        )
    report.cosine_after = pair_cosine()
    return heads, report


def encode_features(
    graph: MultimodalGraph, settings: EncoderSettings
) -> tuple[np.ndarray, ProjectionHeads | None, EncoderReport | None]:
    """Resolve an encoder variant (pretrained, finetuned, structure_aware) to node features."""
    settings.validate()
    if settings.variant == "pretrained":
        return fuse_features(graph, settings.fusion), None, None
    if settings.variant == "finetuned":
        heads, report = train_finetuned_encoder(graph, settings.contrastive)
    else:
        heads, report = train_structure_aware_encoder(graph, settings.contrastive)
    return fuse_features(graph, settings.fusion, heads), heads, report


def save_heads(heads: ProjectionHeads, out_dir: Path, *, config: ContrastiveConfig | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(heads.w_text.value, out_dir / "w_text.emb")
    save_tensor(heads.w_image.value, out_dir / "w_image.emb")
    manifest = {
        "d_text": int(heads.w_text.shape[0]),
        "d_image": int(heads.w_image.shape[0]),
        "d_proj": heads.d_proj,
        "seed": heads.seed,
        "config": dataclass_to_dict(config) if config is not None else None,
    }
    path = out_dir / "heads.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_heads(out_dir: Path) -> ProjectionHeads:
    manifest = json.loads((out_dir / "heads.json").read_text(encoding="utf-8"))
    return ProjectionHeads(
        w_text=Parameter(load_tensor(out_dir / "w_text.emb", (manifest["d_text"], manifest["d_proj"]))),
        w_image=Parameter(load_tensor(out_dir / "w_image.emb", (manifest["d_image"], manifest["d_proj"]))),
        seed=int(manifest["seed"]),
    )
