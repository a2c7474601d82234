"""VLM-as-predictor: prompt assembly, response parsing, batch prediction, SFT export."""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from mmgbench.aligner import AlignerArtifacts
from mmgbench.config import STRUCTURE_MODES, PredictorSettings, StructureSelectSpec
from mmgbench.encoders import selection_features
from mmgbench.errors import (
    Ambiguous,
    ConfigInvalid,
    EmptyInput,
    LabelParseError,
    MissingImage,
    MmgbenchError,
    UnknownLabel,
    Unparseable,
)
from mmgbench.graph import MultimodalGraph, SplitAssignment, check_node, top_k_similar_neighbors
from mmgbench.prompts import NEIGHBOR_TEXT_LABEL, get_template, render_template
from mmgbench.vlm_client import PromptBundle, TextSegment, VlmClient

logger = logging.getLogger(__name__)

RETRY_INSTRUCTION = "\nAnswer with exactly one category name from the options: {candidates}."
EXEMPLAR_SEPARATOR = "\n\n"
_PUNCTUATION = re.compile(r"[^\w\s]")
_WHITESPACE = re.compile(r"\s+")


def format_candidates(candidates: Sequence[str]) -> str:
    return ", ".join(candidates)


@dataclass(slots=True, frozen=True)
class PredictionPrompt:
    bundle: PromptBundle
    neighbors: tuple[int, ...]
    user_text: str


def _text_for(graph: MultimodalGraph, v: int, artifacts: Mapping[int, AlignerArtifacts] | None) -> str:
    if artifacts is not None:
        item = artifacts.get(v)
        if item is not None and (item.t_ss or item.t_s):
            return item.t_ss or item.t_s or ""
    return graph.nodes[v].text


def _neighbor_entries(
    graph: MultimodalGraph,
    neighbors: Sequence[int],
    structure: str,
    artifacts: Mapping[int, AlignerArtifacts] | None,
) -> tuple[list[str], list[Path], list[int]]:
    label = NEIGHBOR_TEXT_LABEL[graph.domain]
    entries: list[str] = []
    images: list[Path] = []
    used: list[int] = []
    for u in neighbors:
        node = graph.nodes[u]
        i = len(entries) + 1
        text = _text_for(graph, u, artifacts)
        if structure == "text":
            entries.append(f"{label}{i}: {text}")
        elif node.image_path is None:
            if structure == "image":
                continue
            entries.append(f"{label}{i}: {text}")
        elif structure == "image":
            entries.append(f"Picture{i}: <image>")
            images.append(node.image_path)
        else:
            entries.append(f"Picture{i}: <image>; {label}{i}: {text}")
            images.append(node.image_path)
        used.append(u)
    return entries, images, used


def prediction_prompt(
    graph: MultimodalGraph,
    v: int,
    candidates: Sequence[str],
    structure: str = "none",
    spec: StructureSelectSpec | None = None,
    artifacts: Mapping[int, AlignerArtifacts] | None = None,
    sft_label: str | None = None,
    *,
    features: np.ndarray | None = None,
) -> PredictionPrompt:
    check_node(graph, v)
    if not candidates:
        raise EmptyInput("candidate set is empty")
    if structure not in STRUCTURE_MODES:
        raise ConfigInvalid(f"unknown structure mode {structure!r}; expected one of {STRUCTURE_MODES}")
    node = graph.nodes[v]
    if node.image_path is None:
        raise MissingImage(f"node {v} has no picture for the predictor template")
    bindings: dict[str, str | None] = {
        "text_information": _text_for(graph, v, artifacts),
        "candidates": format_candidates(candidates),
    }
    images: list[Path] = [node.image_path]
    used: list[int] = []
    kind = "predictor"
    if structure != "none":
        spec = spec or StructureSelectSpec()
        if features is None:
            features = selection_features(graph, spec.similarity_features)
        neighbors = top_k_similar_neighbors(graph, v, spec, features)
        entries, neighbor_images, used = _neighbor_entries(graph, neighbors, structure, artifacts)
        if entries:
            kind = "predictor_structural"
            bindings["neighbor_text"] = " ; ".join(entries)
            images.extend(neighbor_images)
    template = get_template(graph.domain, kind)
    user_text = render_template(template, bindings)
    rendered = user_text
    if sft_label is not None:
        rendered = render_template(template, {**bindings, "truth_label": sft_label})
    return PredictionPrompt(
        bundle=PromptBundle.from_rendered(rendered, images),
        neighbors=tuple(used),
        user_text=user_text,
    )


def build_prediction_prompt(
    graph: MultimodalGraph,
    v: int,
    candidates: Sequence[str],
    structure: str = "none",
    spec: StructureSelectSpec | None = None,
    artifacts: Mapping[int, AlignerArtifacts] | None = None,
    sft_label: str | None = None,
    *,
    features: np.ndarray | None = None,
) -> PromptBundle:
    return prediction_prompt(
        graph, v, candidates, structure, spec, artifacts, sft_label, features=features
    ).bundle


def normalize_label(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return _WHITESPACE.sub(" ", _PUNCTUATION.sub("", text.lower())).strip()


def parse_label(response: str, candidates: Sequence[str]) -> int:
    normalized = [normalize_label(c) for c in candidates]
    if not normalized:
        raise EmptyInput("candidate set is empty")
    if len(set(normalized)) != len(normalized) or "" in normalized:
        raise ConfigInvalid("candidates must be non-empty and distinct after normalization")
    answer = normalize_label(response)
    for index, candidate in enumerate(normalized):
        if answer == candidate:
            return index
    hits = [index for index, candidate in enumerate(normalized) if candidate in answer]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise Ambiguous(f"response mentions {len(hits)} candidates: {[candidates[i] for i in hits]}")
    raise Unparseable(f"no candidate found in response {response!r}")


def select_exemplars(graph: MultimodalGraph, split: SplitAssignment, budget: int) -> list[int]:
    """Lowest-id training node with a picture for each class, in class-index order, up to ``budget``."""
    if budget <= 0:
        return []
    chosen: list[int] = []
    train = sorted(split.train)
    for label in range(graph.num_classes):
        for v in train:
            node = graph.nodes[v]
            if node.label == label and node.image_path is not None:
                chosen.append(v)
                break
        if len(chosen) >= budget:
            break
    return chosen


def join_bundles(bundles: Sequence[PromptBundle], separator: str = EXEMPLAR_SEPARATOR) -> PromptBundle:
    segments: list[Any] = []
    for index, bundle in enumerate(bundles):
        if index:
            segments.append(TextSegment(separator))
        segments.extend(bundle.segments)
    return PromptBundle(tuple(segments), bundles[0].system if bundles else None)


@dataclass(slots=True)
class PredictionRun:
    nodes: list[int] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)
    gold: list[int] = field(default_factory=list)
    responses: list[str] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)
    unparseable: int = 0
    ambiguous: int = 0
    retried: int = 0

    @property
    def accuracy(self) -> float:
        if not self.nodes:
            return 0.0
        return sum(int(p == g) for p, g in zip(self.predictions, self.gold, strict=True)) / len(self.nodes)

    @property
    def unparseable_rate(self) -> float:
        return (self.unparseable + self.ambiguous) / len(self.nodes) if self.nodes else 0.0

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["errors"] = {str(k): v for k, v in sorted(self.errors.items())}
        return data


@dataclass(slots=True)
class _NodeOutcome:
    node_id: int
    prediction: int = -1
    response: str = ""
    error: str | None = None
    parse_failure: str | None = None
    retried: bool = False


def predict_nodes(
    client: VlmClient,
    graph: MultimodalGraph,
    nodes: Sequence[int],
    candidates: Sequence[str],
    opts: PredictorSettings | None = None,
    *,
    artifacts: Mapping[int, AlignerArtifacts] | None = None,
    split: SplitAssignment | None = None,
    features: np.ndarray | None = None,
) -> PredictionRun:
    """Prompt, call and parse per node; failures are recorded per node and never abort the run."""
    opts = opts or PredictorSettings()
    opts.validate()
    class_index = {name: index for index, name in enumerate(graph.classes)}
    if opts.structure != "none" and features is None:
        features = selection_features(graph, opts.select.similarity_features)
    exemplar_bundles: list[PromptBundle] = []
    if opts.icl_budget > 0:
        if split is None:
            raise ConfigInvalid("in-context exemplars need a split to draw training nodes from")
        for e in select_exemplars(graph, split, opts.icl_budget):
            exemplar_bundles.append(
                build_prediction_prompt(
                    graph,
                    e,
                    candidates,
                    opts.structure,
                    opts.select,
                    artifacts,
                    sft_label=graph.classes[graph.nodes[e].label],
                    features=features,
                )
            )

    def run_node(v: int) -> _NodeOutcome:
        outcome = _NodeOutcome(node_id=v)
        try:
            target = build_prediction_prompt(
                graph, v, candidates, opts.structure, opts.select, artifacts, features=features
            )
            bundle = join_bundles([*exemplar_bundles, target])
            outcome.response = client.complete(bundle)
            try:
                index = parse_label(outcome.response, candidates)
            except LabelParseError:
                if not opts.retry_unparseable:
                    raise
                outcome.retried = True
                instruction = TextSegment(RETRY_INSTRUCTION.format(candidates=format_candidates(candidates)))
                outcome.response = client.complete(PromptBundle((*bundle.segments, instruction), bundle.system))
                index = parse_label(outcome.response, candidates)
            outcome.prediction = class_index.get(candidates[index], -1)
        except LabelParseError as exc:
            outcome.parse_failure = type(exc).__name__
        except MmgbenchError as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
        return outcome

    ordered = [int(v) for v in nodes]
    with ThreadPoolExecutor(max_workers=client.config.concurrency_limit) as pool:
        outcomes = list(pool.map(run_node, ordered))

    run = PredictionRun()
    for outcome in outcomes:
        run.nodes.append(outcome.node_id)
        run.predictions.append(outcome.prediction)
        run.gold.append(graph.nodes[outcome.node_id].label)
        run.responses.append(outcome.response)
        run.retried += int(outcome.retried)
        if outcome.parse_failure == Ambiguous.__name__:
            run.ambiguous += 1
        elif outcome.parse_failure is not None:
            run.unparseable += 1
        if outcome.error is not None:
            run.errors[outcome.node_id] = outcome.error
    logger.info(
        "prediction finished",
        extra={
            "nodes": len(run.nodes),
            "accuracy": run.accuracy,
            "unparseable": run.unparseable,
            "ambiguous": run.ambiguous,
            "errors": len(run.errors),
        },
    )
    return run


@dataclass(slots=True)
class SftRecord:
    prompt: PromptBundle
    target: str
    node_id: int
    neighbors: tuple[int, ...]
    user_text: str

    def to_json(self) -> dict[str, Any]:
        label = self.target.removeprefix("Assistant: ")
        return {
            "messages": [
                {"role": "user", "content": self.user_text},
                {"role": "assistant", "content": label},
            ],
            "images": [str(path) for path in self.prompt.image_paths],
            "target": self.target,
            "node_id": self.node_id,
            "neighbors": list(self.neighbors),
        }


def sft_record(
    graph: MultimodalGraph,
    v: int,
    opts: PredictorSettings,
    *,
    artifacts: Mapping[int, AlignerArtifacts] | None = None,
    features: np.ndarray | None = None,
) -> SftRecord:
    label_index = graph.nodes[v].label
    if not 0 <= label_index < graph.num_classes:
        raise UnknownLabel(f"node {v} label {label_index} is outside the class vocabulary")
    label = graph.classes[label_index]
    prompt = prediction_prompt(
        graph, v, graph.classes, opts.structure, opts.select, artifacts, sft_label=label, features=features
    )
    return SftRecord(
        prompt=prompt.bundle,
        target=f"Assistant: {label}",
        node_id=v,
        neighbors=prompt.neighbors,
        user_text=prompt.user_text,
    )


def export_sft_dataset(
    graph: MultimodalGraph,
    split: SplitAssignment,
    opts: PredictorSettings | None,
    out_path: Path,
    *,
    artifacts: Mapping[int, AlignerArtifacts] | None = None,
) -> int:
    """JSON-lines instruction data over the train split, one record per node in id order."""
    opts = opts or PredictorSettings()
    opts.validate()
    features = None
    if opts.structure != "none":
        features = selection_features(graph, opts.select.similarity_features)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with out_path.open("w", encoding="utf-8", newline="\n") as file:
        for v in sorted(split.train):
            record = sft_record(graph, v, opts, artifacts=artifacts, features=features)
            file.write(json.dumps(record.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
            count += 1
    logger.info("sft export written", extra={"records": count, "path": str(out_path)})
    return count
