"""Latent-space structure tokens: token-space projection and pooled neighbor tokens."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from mmgbench.config import StructureSelectSpec
from mmgbench.embedding_io import read_matrix, write_matrix
from mmgbench.encoders import selection_features
from mmgbench.errors import ConfigInvalid, EmptyInput, ModalityUnavailable, ShapeMismatch
from mmgbench.graph import MultimodalGraph, top_k_similar_neighbors
from mmgbench.numerics import Parameter, uniform_init

logger = logging.getLogger(__name__)

TOKEN_MODALITIES = ("text", "image", "both")
POOLING_MODES = ("per_neighbor", "neighborhood")


@dataclass(slots=True)
class TokenProjector:
    w_proj: Parameter

    @classmethod
    def initialize(cls, d_in: int, d_llm: int, *, seed: int = 0) -> TokenProjector:
        return cls(Parameter(uniform_init(np.random.default_rng(seed), d_in, d_llm)))

    @property
    def d_in(self) -> int:
        return int(self.w_proj.shape[0])

    @property
    def d_llm(self) -> int:
        return int(self.w_proj.shape[1])


def project_to_token_space(h: np.ndarray, proj: TokenProjector) -> np.ndarray:
    """z = h W_proj for a single embedding or a matrix of row embeddings."""
    h = np.asarray(h)
    if h.ndim not in (1, 2) or h.shape[-1] != proj.d_in:
        raise ShapeMismatch(f"embedding shape {h.shape} does not match projector input dim {proj.d_in}")
    out = np.asarray(h, dtype=np.float64) @ np.asarray(proj.w_proj.value, dtype=np.float64)
    return out.astype(np.float64 if h.dtype == np.float64 else np.float32)


def _mean_rows(rows: np.ndarray, what: str) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ShapeMismatch(f"{what} must be a P x d matrix, got shape {rows.shape}")
    if rows.shape[0] == 0:
        raise EmptyInput(f"{what} has no rows to pool")
    return np.mean(np.asarray(rows, dtype=np.float64), axis=0).astype(np.float32)


def neighbor_visual_token(patch_embeddings: np.ndarray) -> np.ndarray:
    return _mean_rows(patch_embeddings, "patch embeddings")


def neighbor_text_token(token_embeddings: np.ndarray) -> np.ndarray:
    return _mean_rows(token_embeddings, "token embeddings")


class TokenSource(Protocol):
    def load(self, node_id: int, modality: str) -> np.ndarray: ...


class TokenDirectory:
    """Per-node EMB1 files ``<id>.image.emb`` (patches) and ``<id>.text.emb`` (tokens)."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def path_for(self, node_id: int, modality: str) -> Path:
        return self.root / f"{node_id}.{modality}.emb"

    def load(self, node_id: int, modality: str) -> np.ndarray:
        path = self.path_for(node_id, modality)
        if not path.exists():
            raise ModalityUnavailable(f"no {modality} token file for node {node_id}: {path}")
        return read_matrix(path)


@dataclass(slots=True)
class StructureTokenBlock:
    node_id: int
    neighbor_ids: tuple[int, ...]
    visual_tokens: np.ndarray | None = None
    text_tokens: np.ndarray | None = None
    pooling: str = "per_neighbor"

    @property
    def empty(self) -> bool:
        return not self.neighbor_ids


def assemble_structure_tokens(
    graph: MultimodalGraph,
    v: int,
    spec: StructureSelectSpec | None,
    modality: str,
    sources: TokenSource,
    *,
    features: np.ndarray | None = None,
    pooling: str = "per_neighbor",
) -> StructureTokenBlock:
    """Top-k similar neighbors with one pooled token per neighbor per requested modality.

    Text tokens always stay one row per neighbor, stacked in similarity order.
    ``pooling="neighborhood"`` collapses the visual side to a single row
    averaged over every neighbor's patches.
    """
    if modality not in TOKEN_MODALITIES:
        raise ConfigInvalid(f"unknown token modality {modality!r}; expected one of {TOKEN_MODALITIES}")
    if pooling not in POOLING_MODES:
        raise ConfigInvalid(f"unknown pooling mode {pooling!r}; expected one of {POOLING_MODES}")
    spec = spec or StructureSelectSpec()
    if features is None:
        features = selection_features(graph, spec.similarity_features)
    neighbors = tuple(top_k_similar_neighbors(graph, v, spec, features))
    block = StructureTokenBlock(node_id=int(v), neighbor_ids=neighbors, pooling=pooling)
    if not neighbors:
        return block
    if modality in ("image", "both"):
        patches = [sources.load(u, "image") for u in neighbors]
        if pooling == "per_neighbor":
            block.visual_tokens = np.vstack([neighbor_visual_token(p) for p in patches])
        else:
            block.visual_tokens = neighbor_visual_token(np.vstack(patches))[None, :]
    if modality in ("text", "both"):
        block.text_tokens = np.vstack([neighbor_text_token(sources.load(u, "text")) for u in neighbors])
    return block


def export_structure_tokens(
    graph: MultimodalGraph,
    nodes: Sequence[int],
    spec: StructureSelectSpec | None,
    modality: str,
    sources: TokenSource,
    out_dir: Path,
    *,
    pooling: str = "per_neighbor",
    features: np.ndarray | None = None,
) -> Path:
    """Write one EMB1 file per node and token kind, plus ``manifest.json`` listing neighbor order."""
    spec = spec or StructureSelectSpec()
    if features is None:
        features = selection_features(graph, spec.similarity_features)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: dict[str, Any] = {}
    for v in sorted(int(n) for n in nodes):
        block = assemble_structure_tokens(graph, v, spec, modality, sources, features=features, pooling=pooling)
        entry: dict[str, Any] = {"neighbors": list(block.neighbor_ids)}
        if block.visual_tokens is not None:
            entry["visual"] = write_matrix(block.visual_tokens, out_dir / f"{v}.visual.emb").name
        if block.text_tokens is not None:
            entry["text"] = write_matrix(block.text_tokens, out_dir / f"{v}.text.emb").name
        entries[str(v)] = entry
    manifest = {
        "modality": modality,
        "pooling": pooling,
        "k": spec.k,
        "h": spec.h,
        "similarity_features": spec.similarity_features,
        "nodes": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("structure tokens exported", extra={"nodes": len(entries), "pooling": pooling})
    return path
