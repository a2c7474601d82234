"""Multimodal graph data model, ingestion, splitting, and neighborhood operations."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp

from mmgbench.config import StructureSelectSpec
from mmgbench.embedding_io import EmbeddingTable, read_embedding_table, write_embedding_table
from mmgbench.errors import (
    BadRatios,
    MalformedRecord,
    MissingEmbedding,
    ShapeMismatch,
    UnknownLabel,
    ValidationError,
)

logger = logging.getLogger(__name__)

SeedLike = int | np.random.Generator


@dataclass(slots=True, frozen=True)
class NodeRecord:
    id: int
    text: str
    label: int
    image_row: int | None = None
    image_path: Path | None = None

    @property
    def has_image(self) -> bool:
        return self.image_path is not None


@dataclass(slots=True)
class LoadReport:
    nodes: int
    edges: int
    classes: int
    dropped_self_loops: int = 0
    dropped_duplicates: int = 0
    missing_rows: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(slots=True)
class MultimodalGraph:
    nodes: list[NodeRecord]
    adjacency: sp.csr_matrix
    classes: list[str]
    modality_tables: dict[str, EmbeddingTable] = field(default_factory=dict)
    domain: str = "movies"
    report: LoadReport | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([node.label for node in self.nodes], dtype=np.int64)

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr).astype(np.int64)

    def neighbors(self, v: int) -> np.ndarray:
        check_node(self, v)
        start, end = self.adjacency.indptr[v], self.adjacency.indptr[v + 1]
        return self.adjacency.indices[start:end].astype(np.int64)

    def has_modality(self, modality: str) -> bool:
        return modality in self.modality_tables

    def modality_rows(self, modality: str) -> np.ndarray:
        """Row index into the modality table for each node, -1 where absent."""
        if modality == "text":
            return np.arange(self.num_nodes, dtype=np.int64)
        return np.asarray(
            [-1 if node.image_row is None else node.image_row for node in self.nodes], dtype=np.int64
        )


def check_node(graph: MultimodalGraph, v: int) -> None:
    if not 0 <= int(v) < graph.num_nodes:
        raise ValidationError(f"node {v} out of range for graph with {graph.num_nodes} nodes")


def symmetric_adjacency(num_nodes: int, edges: Iterable[tuple[int, int]]) -> tuple[sp.csr_matrix, int, int]:
    """Build an undirected CSR adjacency; returns (adjacency, self_loops, duplicates)."""
    pairs: list[tuple[int, int]] = []
    self_loops = 0
    for src, dst in edges:
        if src == dst:
            self_loops += 1
            continue
        pairs.append((min(src, dst), max(src, dst)))
    if pairs:
        unique = np.unique(np.asarray(pairs, dtype=np.int64), axis=0)
    else:
        unique = np.empty((0, 2), dtype=np.int64)
    duplicates = len(pairs) - unique.shape[0]
    rows = np.concatenate((unique[:, 0], unique[:, 1]))
    cols = np.concatenate((unique[:, 1], unique[:, 0]))
    data = np.ones(rows.shape[0], dtype=np.int8)
    adjacency = sp.csr_matrix((data, (rows, cols)), shape=(num_nodes, num_nodes))
    adjacency.sort_indices()
    return adjacency, self_loops, duplicates


def build_graph(
    nodes: Sequence[NodeRecord],
    edges: Iterable[tuple[int, int]],
    classes: Sequence[str],
    tables: Mapping[str, EmbeddingTable] | None = None,
    *,
    domain: str = "movies",
) -> MultimodalGraph:
    ordered = sorted(nodes, key=lambda node: node.id)
    if [node.id for node in ordered] != list(range(len(ordered))):
        raise ValidationError("node ids must be exactly 0..N-1")
    for node in ordered:
        if not 0 <= node.label < len(classes):
            raise UnknownLabel(f"node {node.id} has label {node.label} outside [0, {len(classes)})")
    adjacency, self_loops, duplicates = symmetric_adjacency(len(ordered), edges)
    tables = dict(tables or {})
    _check_tables(ordered, tables)
    missing = {
        "image": sum(1 for node in ordered if node.image_row is None),
    } if "image" in tables else {}
    if missing.get("image"):
        logger.warning("image rows missing", extra={"missing_image_rows": missing["image"]})
    graph = MultimodalGraph(
        nodes=list(ordered),
        adjacency=adjacency,
        classes=list(classes),
        modality_tables=tables,
        domain=domain,
    )
    graph.report = LoadReport(
        nodes=graph.num_nodes,
        edges=graph.num_edges,
        classes=graph.num_classes,
        dropped_self_loops=self_loops,
        dropped_duplicates=duplicates,
        missing_rows=missing,
    )
    return graph


def _check_tables(nodes: Sequence[NodeRecord], tables: Mapping[str, EmbeddingTable]) -> None:
    text = tables.get("text")
    if text is not None and text.rows < len(nodes):
        raise MissingEmbedding(text.rows, "text", f"text table has only {text.rows} rows")
    image = tables.get("image")
    for node in nodes:
        if node.image_row is None:
            continue
        if image is None:
            raise MissingEmbedding(node.id, "image", "no image table loaded")
        if not 0 <= node.image_row < image.rows:
            raise MissingEmbedding(node.id, "image", f"row {node.image_row} not in table of {image.rows} rows")


def _read_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def _load_classes(path: Path) -> list[str]:
    lines = _read_lines(path)
    while lines and not lines[-1].strip():
        lines.pop()
    for index, line in enumerate(lines, start=1):
        if not line.strip():
            raise MalformedRecord(path, index, "empty class name")
    return [line.strip() for line in lines]


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _parse_node(raw: str, *, path: Path, line: int, num_classes: int) -> NodeRecord:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(path, line, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise MalformedRecord(path, line, "expected a JSON object")
    node_id = obj.get("id")
    if not _is_int(node_id) or node_id < 0:
        raise MalformedRecord(path, line, "'id' must be a non-negative integer")
    text = obj.get("text", "")
    if not isinstance(text, str):
        raise MalformedRecord(path, line, "'text' must be a string")
    label = obj.get("label")
    if not _is_int(label):
        raise MalformedRecord(path, line, "'label' must be an integer")
    if not 0 <= label < num_classes:
        raise UnknownLabel(f"{path}:{line}: label {label} outside [0, {num_classes})")
    image_row = obj.get("image_row")
    if image_row is not None and (not _is_int(image_row) or image_row < 0):
        raise MalformedRecord(path, line, "'image_row' must be a non-negative integer")
    image_path = obj.get("image_path")
    if image_path is not None and not isinstance(image_path, str):
        raise MalformedRecord(path, line, "'image_path' must be a string")
    if not text and image_row is None and image_path is None:
        raise MalformedRecord(path, line, "node has neither text nor image")
    resolved = None
    if image_path is not None:
        candidate = Path(image_path)
        resolved = candidate if candidate.is_absolute() else path.parent / candidate
    return NodeRecord(id=node_id, text=text, label=label, image_row=image_row, image_path=resolved)


def _load_nodes(path: Path, num_classes: int) -> list[NodeRecord]:
    nodes: list[NodeRecord] = []
    seen: set[int] = set()
    for index, raw in enumerate(_read_lines(path), start=1):
        if not raw.strip():
            continue
        node = _parse_node(raw, path=path, line=index, num_classes=num_classes)
        if node.id in seen:
            raise MalformedRecord(path, index, f"duplicate node id {node.id}")
        seen.add(node.id)
        nodes.append(node)
    if sorted(seen) != list(range(len(nodes))):
        raise MalformedRecord(path, 0, "node ids must be exactly 0..N-1")
    return nodes


def _load_edges(path: Path, num_nodes: int) -> list[tuple[int, int]]:
    edges: list[tuple[int, int]] = []
    for index, raw in enumerate(_read_lines(path), start=1):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 2:
            raise MalformedRecord(path, index, "expected 'src,dst'")
        try:
            src, dst = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise MalformedRecord(path, index, "edge endpoints must be integers") from exc
        if not (0 <= src < num_nodes and 0 <= dst < num_nodes):
            raise MalformedRecord(path, index, f"edge ({src},{dst}) references unknown node")
        edges.append((src, dst))
    return edges


def load_graph(
    node_file: Path,
    edge_file: Path,
    class_file: Path,
    embedding_files: Mapping[str, Path] | None = None,
    *,
    domain: str = "movies",
) -> MultimodalGraph:
    classes = _load_classes(Path(class_file))
    nodes = _load_nodes(Path(node_file), len(classes))
    edges = _load_edges(Path(edge_file), len(nodes))
    tables = {
        modality: read_embedding_table(Path(path), modality)
        for modality, path in (embedding_files or {}).items()
    }
    graph = build_graph(nodes, edges, classes, tables, domain=domain)
    logger.info("graph loaded", extra={"load_report": graph.report.to_dict() if graph.report else None})
    return graph


def write_graph_files(graph: MultimodalGraph, out_dir: Path) -> dict[str, Path]:
    """Write a graph in the on-disk formats `load_graph` reads, edges as normalized u<v lines."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "nodes": out_dir / "nodes.jsonl",
        "edges": out_dir / "edges.txt",
        "classes": out_dir / "classes.txt",
    }
    with paths["nodes"].open("w", encoding="utf-8") as file:
        for node in graph.nodes:
            record: dict[str, Any] = {"id": node.id, "text": node.text, "label": node.label}
            if node.image_row is not None:
                record["image_row"] = node.image_row
            if node.image_path is not None:
                record["image_path"] = str(node.image_path)
            file.write(json.dumps(record, ensure_ascii=False) + "\n")
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    paths["edges"].write_text(
        "".join(f"{upper.row[i]},{upper.col[i]}\n" for i in order), encoding="utf-8"
    )
    paths["classes"].write_text("".join(f"{name}\n" for name in graph.classes), encoding="utf-8")
    for modality, table in graph.modality_tables.items():
        paths[modality] = write_embedding_table(table, out_dir / f"{modality}.emb")
    manifest = {
        "domain": graph.domain,
        "nodes": graph.num_nodes,
        "edges": graph.num_edges,
        "classes": graph.num_classes,
        "modalities": {key: [table.rows, table.dim] for key, table in graph.modality_tables.items()},
    }
    paths["manifest"] = out_dir / "manifest.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return paths


@dataclass(slots=True, frozen=True)
class SplitAssignment:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int
    ratios: tuple[float, float, float]

    def part(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ValidationError(f"unknown split part {name!r}")
        return np.asarray(getattr(self, name), dtype=np.int64)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SplitAssignment:
        ratios = tuple(float(value) for value in data["ratios"])
        return cls(
            train=tuple(int(v) for v in data["train"]),
            val=tuple(int(v) for v in data["val"]),
            test=tuple(int(v) for v in data["test"]),
            seed=int(data["seed"]),
            ratios=(ratios[0], ratios[1], ratios[2]),
        )

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> SplitAssignment:
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def split_nodes(
    graph: MultimodalGraph | int,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitAssignment:
    """Unstratified permutation split; val/test sizes round half up, train takes the rest."""
    values = tuple(float(value) for value in ratios)
    if len(values) != 3 or any(not value > 0.0 for value in values) or abs(sum(values) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive fractions summing to 1, got {ratios}")
    num_nodes = graph if isinstance(graph, int) else graph.num_nodes
    n_val = int(math.floor(values[1] * num_nodes + 0.5))
    n_test = int(math.floor(values[2] * num_nodes + 0.5))
    n_test = min(n_test, num_nodes - n_val)
    permutation = np.random.default_rng(seed).permutation(num_nodes)
    val = permutation[:n_val]
    test = permutation[n_val : n_val + n_test]
    train = permutation[n_val + n_test :]
    return SplitAssignment(
        train=tuple(int(v) for v in np.sort(train)),
        val=tuple(int(v) for v in np.sort(val)),
        test=tuple(int(v) for v in np.sort(test)),
        seed=int(seed),
        ratios=(values[0], values[1], values[2]),
    )


def sample_neighbors(graph: MultimodalGraph, v: int, m: int = 5, seed: SeedLike = 0) -> list[int]:
    neighbors = graph.neighbors(v)
    if neighbors.size == 0:
        return []
    rng = np.random.default_rng(seed)
    chosen = rng.choice(neighbors, size=min(m, neighbors.size), replace=False)
    return [int(u) for u in chosen]


def hop_neighborhood(graph: MultimodalGraph, v: int, h: int = 1) -> list[int]:
    check_node(graph, v)
    visited = {int(v)}
    frontier = [int(v)]
    for _ in range(h):
        next_frontier: list[int] = []
        for node in frontier:
            for u in graph.neighbors(node):
                u = int(u)
                if u not in visited:
                    visited.add(u)
                    next_frontier.append(u)
        if not next_frontier:
            break
        frontier = next_frontier
    visited.discard(int(v))
    return sorted(visited)


def top_k_similar_neighbors(
    graph: MultimodalGraph,
    v: int,
    spec: StructureSelectSpec | None = None,
    features: np.ndarray | None = None,
) -> list[int]:
    """Up to k nodes within h hops, by descending cosine to v; ties by ascending id."""
    spec = spec or StructureSelectSpec()
    spec.validate()
    if features is None:
        raise ShapeMismatch("top_k_similar_neighbors needs a feature matrix")
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != graph.num_nodes:
        raise ShapeMismatch(f"features must have one row per node, got {features.shape}")
    candidates = np.asarray(hop_neighborhood(graph, v, spec.h), dtype=np.int64)
    if candidates.size == 0:
        return []
    anchor = features[v].astype(np.float64)
    rows = features[candidates].astype(np.float64)
    norms = np.linalg.norm(rows, axis=1) * np.linalg.norm(anchor)
    dots = rows @ anchor
    sims = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0.0)
    order = np.lexsort((candidates, -sims))
    return [int(u) for u in candidates[order[: spec.k]]]
