"""Modality alignment: VLM-written image descriptions and (structure-aware) summaries.

Prompt-level alignment turns each node's image into a description, then asks
the VLM to merge it with the node text into one summary; the structural variant
also feeds descriptions of sampled hop-1 neighbors. Latent alignment simply
swaps unimodal node features for concatenated multimodal embeddings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from mmgbench.encoders import ProjectionHeads, fuse_features
from mmgbench.errors import MissingDescription, MmgbenchError, NoImage, ValidationError
from mmgbench.graph import MultimodalGraph, check_node, sample_neighbors
from mmgbench.prompts import get_template, render_template
from mmgbench.vlm_client import PromptBundle, VlmClient

logger = logging.getLogger(__name__)

NEIGHBOR_SEPARATOR = "; "


@dataclass(slots=True)
class AlignerArtifacts:
    node_id: int
    t_i: str | None = None
    t_s: str | None = None
    t_ss: str | None = None

    def __post_init__(self) -> None:
        if (self.t_s is not None or self.t_ss is not None) and self.t_i is None:
            raise ValidationError(f"node {self.node_id}: a summary requires an image description")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        if data["t_ss"] is None:
            del data["t_ss"]
        return data


class ArtifactStore:
    """Per-node JSON files named ``<node_id>-<input hash>.json``; each file is written once."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path_for(self, node_id: int, input_key: str) -> Path:
        return self.root / f"{node_id:08d}-{input_key[:16]}.json"

    def get(self, node_id: int, input_key: str) -> AlignerArtifacts | None:
        path = self.path_for(node_id, input_key)
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return AlignerArtifacts(
            node_id=int(data["node_id"]), t_i=data.get("t_i"), t_s=data.get("t_s"), t_ss=data.get("t_ss")
        )

    def put(self, artifacts: AlignerArtifacts, input_key: str) -> Path:
        path = self.path_for(artifacts.node_id, input_key)
        with self._lock:
            if not path.exists():
                with path.open("x", encoding="utf-8") as file:
                    json.dump(artifacts.to_dict(), file, sort_keys=True, ensure_ascii=False)
        return path

    def load_all(self) -> dict[int, AlignerArtifacts]:
        loaded: dict[int, AlignerArtifacts] = {}
        for path in sorted(self.root.glob("*.json")):
            data = json.loads(path.read_text(encoding="utf-8"))
            node_id = int(data["node_id"])
            loaded[node_id] = AlignerArtifacts(node_id, data.get("t_i"), data.get("t_s"), data.get("t_ss"))
        return loaded


def artifact_input_key(
    graph: MultimodalGraph, v: int, *, model_name: str, structural: bool, neighbor_count: int, seed: int
) -> str:
    node = graph.nodes[v]
    image_digest = None
    if node.image_path is not None and Path(node.image_path).exists():
        image_digest = hashlib.sha256(Path(node.image_path).read_bytes()).hexdigest()
    payload = {
        "domain": graph.domain,
        "text": node.text,
        "image": image_digest,
        "model": model_name,
        "structural": structural,
        "neighbor_count": neighbor_count,
        "seed": seed,
    }
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def generate_image_description(client: VlmClient, graph: MultimodalGraph, v: int) -> str:
    check_node(graph, v)
    node = graph.nodes[v]
    if node.image_path is None:
        raise NoImage(f"node {v} has no image_path")
    rendered = render_template(get_template(graph.domain, "image_description"), {})
    return client.complete(PromptBundle.from_rendered(rendered, [node.image_path]))


def structural_neighbors(
    graph: MultimodalGraph, v: int, descriptions: Mapping[int, str], *, neighbor_count: int = 5, seed: int = 0
) -> list[int]:
    """Random hop-1 sample in id order, keeping only neighbors that already have a description."""
    rng = np.random.default_rng((seed, v))
    sampled = sorted(sample_neighbors(graph, v, neighbor_count, rng))
    return [u for u in sampled if descriptions.get(u)]


def summarize_multimodal(
    client: VlmClient,
    graph: MultimodalGraph,
    v: int,
    structural: bool = False,
    *,
    descriptions: Mapping[int, str],
    neighbor_count: int = 5,
    seed: int = 0,
) -> str:
    check_node(graph, v)
    description = descriptions.get(v)
    if not description:
        raise MissingDescription(f"node {v} has no image description to summarize")
    node = graph.nodes[v]
    bindings: dict[str, str | None] = {"text_information": node.text, "image_summary": description}
    kind = "aligner_summary"
    if structural:
        kind = "aligner_summary_structural"
        neighbors = structural_neighbors(graph, v, descriptions, neighbor_count=neighbor_count, seed=seed)
        if neighbors:
            bindings["neighbor_text"] = NEIGHBOR_SEPARATOR.join(graph.nodes[u].text for u in neighbors)
            bindings["neighbor_image_summary"] = NEIGHBOR_SEPARATOR.join(descriptions[u] for u in neighbors)
    rendered = render_template(get_template(graph.domain, kind), bindings)
    return client.complete(PromptBundle.from_rendered(rendered, []))


def latent_align_features(graph: MultimodalGraph, heads: ProjectionHeads | None = None) -> np.ndarray:
    return fuse_features(graph, "concat", heads)


@dataclass(slots=True)
class AlignmentRun:
    artifacts: dict[int, AlignerArtifacts] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)
    paths: dict[int, str] = field(default_factory=dict)

    @property
    def described(self) -> int:
        return sum(1 for item in self.artifacts.values() if item.t_i is not None)


def _fan_out(client: VlmClient, func: Any, nodes: Sequence[int]) -> list[tuple[int, str | None, str | None]]:
    def call(v: int) -> tuple[int, str | None, str | None]:
        try:
            return v, func(v), None
        except MmgbenchError as exc:
            return v, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=client.config.concurrency_limit) as pool:
        return list(pool.map(call, nodes))


def run_alignment(
    client: VlmClient,
    graph: MultimodalGraph,
    nodes: Sequence[int],
    store: ArtifactStore | None = None,
    *,
    structural: bool = False,
    neighbor_count: int = 5,
    seed: int = 0,
) -> AlignmentRun:
    """Describe, summarize, and optionally structurally summarize ``nodes``; failures are kept per node."""
    run = AlignmentRun()
    ordered = sorted(int(v) for v in nodes)

    descriptions: dict[int, str] = {}
    for v, text, error in _fan_out(client, lambda v: generate_image_description(client, graph, v), ordered):
        if text is not None:
            descriptions[v] = text
        elif error is not None:
            run.errors[v] = error

    def summarize(structure: bool) -> dict[int, str]:
        done: dict[int, str] = {}
        candidates = [v for v in ordered if v in descriptions]

        def work(v: int) -> str:
            return summarize_multimodal(
                client, graph, v, structure, descriptions=descriptions, neighbor_count=neighbor_count, seed=seed
            )

        for v, text, error in _fan_out(client, work, candidates):
            if text is not None:
                done[v] = text
            elif error is not None:
                run.errors.setdefault(v, error)
        return done

    summaries = summarize(False)
    structural_summaries = summarize(True) if structural else {}

    for v in ordered:
        t_i = descriptions.get(v)
        artifacts = AlignerArtifacts(
            node_id=v,
            t_i=t_i,
            t_s=summaries.get(v) if t_i is not None else None,
            t_ss=structural_summaries.get(v) if t_i is not None else None,
        )
        run.artifacts[v] = artifacts
        if store is not None:
            key = artifact_input_key(
                graph,
                v,
                model_name=client.config.model_name,
                structural=structural,
                neighbor_count=neighbor_count,
                seed=seed,
            )
            run.paths[v] = str(store.put(artifacts, key))
    logger.info(
        "alignment finished",
        extra={"nodes": len(ordered), "described": run.described, "errors": len(run.errors)},
    )
    return run
