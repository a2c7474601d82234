"""Synthetic multimodal graphs with known structure, plus an on-disk Movies-shaped fixture."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from mmgbench.embedding_io import EmbeddingTable, write_matrix
from mmgbench.graph import MultimodalGraph, NodeRecord, build_graph

MOVIE_CLASSES: tuple[str, ...] = (
    "Action",
    "Adventure",
    "Animation",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Family",
    "Fantasy",
    "Horror",
    "Music",
    "Musical",
    "Mystery",
    "Romance",
    "Science Fiction",
    "Sports",
    "Thriller",
    "War",
    "Western",
)


def _block_edges(rng: np.random.Generator, blocks: np.ndarray, p_in: float, p_out: float) -> list[tuple[int, int]]:
    n = blocks.size
    rows, cols = np.triu_indices(n, k=1)
    same = blocks[rows] == blocks[cols]
    keep = rng.random(rows.size) < np.where(same, p_in, p_out)
    return list(zip(rows[keep].tolist(), cols[keep].tolist(), strict=True))


def _graph(
    labels: np.ndarray,
    edges: list[tuple[int, int]],
    classes: list[str],
    text: np.ndarray,
    image: np.ndarray,
    *,
    domain: str = "movies",
) -> MultimodalGraph:
    nodes = [
        NodeRecord(id=i, text=f"node {i}", label=int(label), image_row=i) for i, label in enumerate(labels)
    ]
    tables = {"text": EmbeddingTable("text", text), "image": EmbeddingTable("image", image)}
    return build_graph(nodes, edges, classes, tables, domain=domain)


def two_cluster_graph(
    n: int = 200,
    dim: int = 8,
    *,
    p_in: float = 0.08,
    p_out: float = 0.002,
    separation: float = 2.0,
    noise: float = 1.0,
    seed: int = 0,
) -> MultimodalGraph:
    """Two balanced classes; features are class centers plus noise in both modalities."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = rng.normal(size=(2, dim))
    centers *= separation / np.linalg.norm(centers[0] - centers[1])
    text = centers[labels] + noise * rng.normal(size=(n, dim))
    image = centers[labels] + noise * rng.normal(size=(n, dim))
    edges = _block_edges(rng, labels, p_in, p_out)
    return _graph(labels, edges, ["class_0", "class_1"], text, image)


def xor_multimodal_graph(
    n: int = 1000,
    dim: int = 8,
    *,
    noise: float = 0.3,
    p_edge: float = 0.004,
    seed: int = 0,
) -> MultimodalGraph:
    """label = text bit XOR image bit, so each modality alone is marginally uninformative."""
    rng = np.random.default_rng(seed)
    text_bit = rng.integers(0, 2, size=n)
    image_bit = rng.integers(0, 2, size=n)
    labels = text_bit ^ image_bit
    direction_t = rng.normal(size=dim)
    direction_i = rng.normal(size=dim)
    direction_t /= np.linalg.norm(direction_t)
    direction_i /= np.linalg.norm(direction_i)
    text = np.outer(2 * text_bit - 1, direction_t) + noise * rng.normal(size=(n, dim))
    image = np.outer(2 * image_bit - 1, direction_i) + noise * rng.normal(size=(n, dim))
    edges = _block_edges(rng, np.zeros(n, dtype=np.int64), p_edge, p_edge)
    return _graph(labels, edges, ["class_0", "class_1"], text, image)


def two_block_graph(
    n_per_block: int = 64,
    *,
    d_text: int = 16,
    d_image: int = 16,
    p_in: float = 0.3,
    p_out: float = 0.01,
    noise: float = 1.0,
    seed: int = 0,
) -> MultimodalGraph:
    """Dense intra-block edges and block-correlated embeddings in both modalities."""
    rng = np.random.default_rng(seed)
    blocks = np.repeat(np.arange(2), n_per_block)
    text = rng.normal(size=(2, d_text))[blocks] + noise * rng.normal(size=(blocks.size, d_text))
    image = rng.normal(size=(2, d_image))[blocks] + noise * rng.normal(size=(blocks.size, d_image))
    edges = _block_edges(rng, blocks, p_in, p_out)
    return _graph(blocks, edges, ["block_0", "block_1"], text, image)


@dataclass(slots=True)
class FixturePaths:
    root: Path
    nodes: Path
    edges: Path
    classes: Path
    manifest: Path
    embeddings: dict[str, Path] = field(default_factory=dict)
    token_dir: Path | None = None


def write_png(path: Path, color: tuple[int, int, int], size: int = 8) -> Path:
    """Solid RGB square; OpenCV stores channels as BGR."""
    pixels = np.full((size, size, 3), color[::-1], dtype=np.uint8)
    if not cv2.imwrite(str(path), pixels):
        raise OSError(f"failed to write {path}")
    return path


def write_movies_fixture(
    out_dir: Path,
    *,
    num_nodes: int = 190,
    avg_degree: int = 4,
    dim: int = 16,
    patches: int = 4,
    tokens: int = 3,
    seed: int = 0,
) -> FixturePaths:
    """Movies-format files: nodes.jsonl, edges.txt (with duplicate and self-loop lines), classes.txt,
    text/image EMB1 tables, per-node PNG pictures, per-node token files, and manifest.json."""
    rng = np.random.default_rng(seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_dir = out_dir / "images"
    token_dir = out_dir / "tokens"
    images_dir.mkdir(exist_ok=True)
    token_dir.mkdir(exist_ok=True)
    num_classes = len(MOVIE_CLASSES)
    labels = np.arange(num_nodes) % num_classes
    centers = rng.normal(size=(num_classes, dim))
    text = centers[labels] + 0.5 * rng.normal(size=(num_nodes, dim))
    image = centers[labels] + 0.5 * rng.normal(size=(num_nodes, dim))

    paths = FixturePaths(
        root=out_dir,
        nodes=out_dir / "nodes.jsonl",
        edges=out_dir / "edges.txt",
        classes=out_dir / "classes.txt",
        manifest=out_dir / "manifest.json",
        embeddings={"text": out_dir / "text.emb", "image": out_dir / "image.emb"},
        token_dir=token_dir,
    )
    with paths.nodes.open("w", encoding="utf-8") as file:
        for i, label in enumerate(labels):
            name = MOVIE_CLASSES[int(label)]
            color = tuple(int(c) for c in rng.integers(0, 256, size=3))
            write_png(images_dir / f"{i}.png", (color[0], color[1], color[2]))
            record = {
                "id": i,
                "text": f"Movie {i}: a {name.lower()} title",
                "label": int(label),
                "image_row": i,
                "image_path": f"images/{i}.png",
            }
            file.write(json.dumps(record) + "\n")
            write_matrix(image[i] + 0.1 * rng.normal(size=(patches, dim)), token_dir / f"{i}.image.emb")
            write_matrix(text[i] + 0.1 * rng.normal(size=(tokens, dim)), token_dir / f"{i}.text.emb")

    target_edges = num_nodes * avg_degree // 2
    unique: set[tuple[int, int]] = set()
    lines: list[str] = []
    while len(unique) < target_edges:
        u, v = (int(x) for x in rng.integers(0, num_nodes, size=2))
        if u == v:
            continue
        if rng.random() < 0.7:
            v = int(rng.choice(np.flatnonzero(labels == labels[u])))
            if u == v:
                continue
        unique.add((min(u, v), max(u, v)))
        lines.append(f"{u},{v}")
    lines.append(lines[0])
    first_u, first_v = lines[0].split(",")
    lines.append(f"{first_v},{first_u}")
    lines.append("0,0")
    paths.edges.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths.classes.write_text("".join(f"{name}\n" for name in MOVIE_CLASSES), encoding="utf-8")
    write_matrix(text, paths.embeddings["text"])
    write_matrix(image, paths.embeddings["image"])
    manifest = {"domain": "movies", "nodes": num_nodes, "edges": len(unique), "classes": num_classes}
    paths.manifest.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return paths
