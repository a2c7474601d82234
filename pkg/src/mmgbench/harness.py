"""Experiment orchestration: paradigm dispatch, seed aggregation, reports, ablations."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from mmgbench.aligner import AlignerArtifacts, ArtifactStore, latent_align_features, run_alignment
from mmgbench.config import (
    DATASET_STATS,
    GNN_MODELS,
    MULTIMODAL_MODELS,
    DatasetConfig,
    EncoderSettings,
    ExperimentConfig,
    GnnConfig,
    dataclass_to_dict,
)
from mmgbench.embedding_io import read_matrix
from mmgbench.encoders import ProjectionHeads, encode_features, fuse_features, modality_matrix, project_modality
from mmgbench.errors import (
    ConfigInvalid,
    MmgbenchError,
    ModalityUnavailable,
    PipelineError,
    ShapeMismatch,
    ValidationError,
)
from mmgbench.gnn import Features, predict, save_model, train_node_classifier
from mmgbench.graph import MultimodalGraph, SplitAssignment, load_graph, split_nodes, write_graph_files
from mmgbench.metrics import accuracy, confusion_matrix, macro_f1, mean_std
from mmgbench.predictor import export_sft_dataset, predict_nodes
from mmgbench.vlm_client import VlmClient, build_client, load_mock_rules

UTC = timezone.utc  # datetime.UTC alias (Python 3.11+)

logger = logging.getLogger(__name__)

ABLATION_MODES: tuple[str, ...] = ("text", "image", "text+image")
REPORT_FILE = "report.json"
MARKDOWN_FILE = "report.md"
TIMESTAMP_FILE = "timestamps.json"


@dataclass(slots=True)
class SeedRun:
    seed: int
    nodes: list[int] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)
    gold: list[int] = field(default_factory=list)
    accuracy: float | None = None
    macro_f1: float | None = None
    confusion: list[list[int]] = field(default_factory=list)
    details: dict[str, Any] = field(default_factory=dict)
    error: str | None = None


@dataclass(slots=True)
class ExperimentReport:
    name: str
    paradigm: str
    model: str
    config: dict[str, Any]
    dataset: dict[str, Any]
    split: dict[str, Any]
    metrics: dict[str, Any]
    runs: list[SeedRun]
    errors: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        """Everything except wall-clock time, which lives in the timestamp sidecar."""
        data = asdict(self)
        del data["wall_clock_s"]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_experiment_graph(dataset: DatasetConfig) -> MultimodalGraph:
    dataset.validate()
    return load_graph(
        dataset.nodes, dataset.edges, dataset.classes, dataset.embeddings, domain=dataset.domain
    )


def ingest_dataset(dataset: DatasetConfig, out_dir: Path | None = None) -> dict[str, Any]:
    """Load and validate a dataset, compare its counts against any manifest and the reference
    statistics, and optionally write a normalized copy."""
    graph = load_experiment_graph(dataset)
    assert graph.report is not None
    summary: dict[str, Any] = {"load_report": graph.report.to_dict(), "domain": graph.domain}
    counts = {"nodes": graph.num_nodes, "edges": graph.num_edges, "classes": graph.num_classes}

    manifest_path = Path(dataset.nodes).parent / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        mismatched = {key: (manifest.get(key), value) for key, value in counts.items() if manifest.get(key) != value}
        if mismatched:
            raise ValidationError(f"{manifest_path}: counts differ from manifest (expected, loaded): {mismatched}")
        summary["manifest"] = str(manifest_path)

    if dataset.name is not None:
        reference = DATASET_STATS.get(dataset.name)
        if reference is None:
            raise ConfigInvalid(f"no reference statistics for dataset {dataset.name!r}")
        expected = dict(zip(("nodes", "edges", "classes"), reference, strict=True))
        summary["matches_reference"] = expected == counts
        if expected != counts:
            logger.warning("dataset differs from reference statistics", extra={"expected": expected, **counts})

    if out_dir is not None:
        summary["written"] = {key: str(path) for key, path in write_graph_files(graph, out_dir).items()}
    return summary


def model_inputs(
    graph: MultimodalGraph, model_kind: str, fusion: str = "concat", heads: ProjectionHeads | None = None
) -> Features:
    """Feature input for a GNN: a (text, image) pair for the multimodal models, one matrix otherwise."""
    if model_kind in MULTIMODAL_MODELS:
        return (
            project_modality(modality_matrix(graph, "text"), heads, "text"),
            project_modality(modality_matrix(graph, "image"), heads, "image"),
        )
    return fuse_features(graph, fusion, heads)


def _score(run: SeedRun, num_classes: int) -> SeedRun:
    run.accuracy = accuracy(run.predictions, run.gold)
    run.macro_f1 = macro_f1(run.predictions, run.gold, num_classes)
    run.confusion = confusion_matrix(run.predictions, run.gold, num_classes).tolist()
    return run


def _relative(path: Path, root: Path) -> str:
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return str(path)


def _gnn_seed(
    graph: MultimodalGraph,
    features: Features,
    split: SplitAssignment,
    gnn: GnnConfig,
    seed: int,
    out_dir: Path,
) -> SeedRun:
    trained = train_node_classifier(graph, features, split, replace(gnn, seed=seed))
    nodes = split.part("test")
    preds, _ = predict(trained, graph, features, nodes)
    save_model(trained, out_dir / f"seed-{seed}" / "model")
    run = SeedRun(
        seed=seed,
        nodes=[int(v) for v in nodes],
        predictions=[int(p) for p in preds],
        gold=[int(graph.nodes[int(v)].label) for v in nodes],
        details={"best_epoch": trained.metrics.best_epoch, "val_accuracy": trained.metrics.val_accuracy},
    )
    return _score(run, graph.num_classes)


def _encoder_seed(
    cfg: ExperimentConfig, graph: MultimodalGraph, split: SplitAssignment, seed: int, out_dir: Path
) -> SeedRun:
    settings = EncoderSettings(
        variant=cfg.encoder.variant,
        fusion=cfg.encoder.fusion,
        contrastive=replace(cfg.encoder.contrastive, seed=seed),
    )
    fused, heads, report = encode_features(graph, settings)
    features: Features = fused
    if cfg.gnn.model in MULTIMODAL_MODELS:
        features = model_inputs(graph, cfg.gnn.model, cfg.encoder.fusion, heads)
    run = _gnn_seed(graph, features, split, cfg.gnn, seed, out_dir)
    if report is not None:
        run.details["encoder"] = report.to_dict()
    return run


def _aligned_features(cfg: ExperimentConfig, graph: MultimodalGraph) -> Features:
    if cfg.aligner.mode == "latent":
        if cfg.gnn.model in MULTIMODAL_MODELS:
            return model_inputs(graph, cfg.gnn.model)
        return latent_align_features(graph)
    if cfg.aligner.summary_embeddings is None:
        raise ConfigInvalid("prompt-level alignment needs aligner.summary_embeddings to train a classifier")
    summaries = read_matrix(cfg.aligner.summary_embeddings)
    if summaries.shape[0] != graph.num_nodes:
        raise ShapeMismatch(
            f"{cfg.aligner.summary_embeddings}: {summaries.shape[0]} summary rows for {graph.num_nodes} nodes"
        )
    if cfg.gnn.model in MULTIMODAL_MODELS:
        return (summaries, modality_matrix(graph, "image"))
    return summaries


def _align_all(
    cfg: ExperimentConfig, graph: MultimodalGraph, client: VlmClient, out_dir: Path
) -> dict[int, AlignerArtifacts]:
    run = run_alignment(
        client,
        graph,
        range(graph.num_nodes),
        ArtifactStore(out_dir / "aligner"),
        structural=cfg.aligner.structural,
        neighbor_count=cfg.aligner.neighbor_count,
        seed=cfg.split.seed,
    )
    return run.artifacts


def _predictor_seed(
    cfg: ExperimentConfig,
    graph: MultimodalGraph,
    split: SplitAssignment,
    seed: int,
    client: VlmClient,
    artifacts: Mapping[int, AlignerArtifacts] | None,
) -> SeedRun:
    nodes = [int(v) for v in split.part(cfg.predictor.eval_split)]
    if cfg.predictor.max_nodes is not None:
        nodes = nodes[: cfg.predictor.max_nodes]
    result = predict_nodes(
        client, graph, nodes, graph.classes, cfg.predictor, artifacts=artifacts, split=split
    )
    run = SeedRun(
        seed=seed,
        nodes=result.nodes,
        predictions=result.predictions,
        gold=result.gold,
        details={
            "unparseable": result.unparseable,
            "ambiguous": result.ambiguous,
            "retried": result.retried,
            "unparseable_rate": result.unparseable_rate,
            "node_errors": {str(k): v for k, v in sorted(result.errors.items())},
        },
    )
    return _score(run, graph.num_classes)


def _needs_client(cfg: ExperimentConfig) -> bool:
    return cfg.paradigm == "predictor" or (cfg.paradigm == "aligner" and cfg.aligner.mode == "prompt")


def _client_for(cfg: ExperimentConfig) -> VlmClient:
    return build_client(
        cfg.client_kind,
        cfg.client,
        cfg.cache_dir,
        rules=load_mock_rules(cfg.mock_rules),
        default=cfg.mock_default,
    )


def _aggregate(runs: Sequence[SeedRun], paradigm: str) -> dict[str, Any]:
    scored = [run for run in runs if run.error is None and run.accuracy is not None]
    metrics: dict[str, Any] = {"seeds": len(scored), "accuracy": None, "accuracy_std": None}
    if not scored:
        return metrics
    metrics["accuracy"], metrics["accuracy_std"] = mean_std([run.accuracy or 0.0 for run in scored])
    metrics["macro_f1"], metrics["macro_f1_std"] = mean_std([run.macro_f1 or 0.0 for run in scored])
    if paradigm == "predictor":
        metrics["unparseable_rate"] = float(np.mean([run.details["unparseable_rate"] for run in scored]))
    return metrics


def _model_label(cfg: ExperimentConfig) -> str:
    if cfg.paradigm == "predictor":
        return f"vlm:{cfg.client.model_name}"
    return cfg.gnn.label


def run_experiment(cfg: ExperimentConfig, client: VlmClient | None = None) -> ExperimentReport:
    """Run every seed of one experiment and write report.json, report.md and timestamps.json.

    Pipeline failures are recorded per seed; validation failures propagate.
    """
    started = time.perf_counter()
    started_at = datetime.now(UTC).isoformat()
    cfg.validate()
    graph = load_experiment_graph(cfg.dataset)
    out_dir = Path(cfg.output_dir) / cfg.name
    out_dir.mkdir(parents=True, exist_ok=True)
    split = split_nodes(graph, cfg.split.ratios, cfg.split.seed)
    split_path = split.save(out_dir / "split.json")
    artifacts: dict[str, str] = {"split": _relative(split_path, out_dir)}

    if client is None and _needs_client(cfg):
        client = _client_for(cfg)

    aligned: dict[int, AlignerArtifacts] | None = None
    features: Features | None = None
    if cfg.paradigm == "aligner":
        features = _aligned_features(cfg, graph)
        if cfg.aligner.mode == "prompt":
            assert client is not None
            _align_all(cfg, graph, client, out_dir)
            artifacts["aligner"] = "aligner"
    elif cfg.paradigm == "predictor" and cfg.aligner.mode == "prompt":
        assert client is not None
        aligned = _align_all(cfg, graph, client, out_dir)
        artifacts["aligner"] = "aligner"

    runs: list[SeedRun] = []
    errors: dict[str, str] = {}
    for seed in cfg.seeds:
        try:
            if cfg.paradigm == "encoder":
                run = _encoder_seed(cfg, graph, split, seed, out_dir)
            elif cfg.paradigm == "aligner":
                assert features is not None
                run = _gnn_seed(graph, features, split, cfg.gnn, seed, out_dir)
            else:
                assert client is not None
                run = _predictor_seed(cfg, graph, split, seed, client, aligned)
        except PipelineError as exc:
            run = SeedRun(seed=seed, error=f"{type(exc).__name__}: {exc}")
            errors[str(seed)] = run.error or ""
            logger.warning("seed failed", extra={"experiment": cfg.name, "seed": seed, "error": run.error})
        runs.append(run)
        if cfg.paradigm != "predictor" and run.error is None:
            artifacts[f"model_seed_{seed}"] = f"seed-{seed}/model"

    if cfg.paradigm == "predictor" and cfg.predictor.export_sft:
        sft_path = out_dir / "sft.jsonl"
        export_sft_dataset(graph, split, cfg.predictor, sft_path, artifacts=aligned)
        artifacts["sft"] = _relative(sft_path, out_dir)

    assert graph.report is not None
    report = ExperimentReport(
        name=cfg.name,
        paradigm=cfg.paradigm,
        model=_model_label(cfg),
        config=dataclass_to_dict(cfg),
        dataset=graph.report.to_dict(),
        split={
            "seed": split.seed,
            "ratios": list(split.ratios),
            **{part: len(getattr(split, part)) for part in ("train", "val", "test")},
        },
        metrics=_aggregate(runs, cfg.paradigm),
        runs=runs,
        errors=errors,
        artifacts=dict(sorted(artifacts.items())),
    )
    report.wall_clock_s = time.perf_counter() - started
    write_report(report, out_dir, started_at=started_at)
    logger.info(
        "experiment finished",
        extra={"experiment": cfg.name, "accuracy": report.metrics["accuracy"], "failed_seeds": len(errors)},
    )
    return report


def write_report(report: ExperimentReport, out_dir: Path, *, started_at: str | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / REPORT_FILE
    path.write_text(report.to_json(), encoding="utf-8")
    (out_dir / MARKDOWN_FILE).write_text(render_markdown(report.to_dict()), encoding="utf-8")
    sidecar = {
        "started_at": started_at,
        "finished_at": datetime.now(UTC).isoformat(),
        "wall_clock_s": report.wall_clock_s,
    }
    (out_dir / TIMESTAMP_FILE).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_report(path: Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def run_batch(
    configs: Sequence[ExperimentConfig], *, client: VlmClient | None = None, max_workers: int = 1
) -> dict[str, ExperimentReport | str]:
    """Run experiments independently; any failure is recorded under that experiment's name."""
    names = [cfg.name for cfg in configs]
    if len(set(names)) != len(names):
        raise ConfigInvalid(f"experiment names must be unique within a batch: {sorted(names)}")

    def work(cfg: ExperimentConfig) -> ExperimentReport | str:
        try:
            return run_experiment(cfg, client)
        except MmgbenchError as exc:
            logger.warning("experiment failed", extra={"experiment": cfg.name, "error": str(exc)})
            return f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        outcomes = list(pool.map(work, configs))
    return dict(sorted(zip(names, outcomes, strict=True)))


def _percent(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "n/a"
    if std is None:
        return f"{100 * mean:.2f}"
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def render_markdown(report: Mapping[str, Any]) -> str:
    metrics = report["metrics"]
    lines = [
        f"# {report['name']}",
        "",
        f"- paradigm: {report['paradigm']}",
        f"- model: {report['model']}",
        f"- seeds: {metrics['seeds']}",
        f"- accuracy (%): {_percent(metrics['accuracy'], metrics['accuracy_std'])}",
    ]
    if "macro_f1" in metrics:
        lines.append(f"- macro-F1 (%): {_percent(metrics['macro_f1'], metrics['macro_f1_std'])}")
    if "unparseable_rate" in metrics:
        lines.append(f"- unparseable rate: {metrics['unparseable_rate']:.4f}")
    lines += ["", "| seed | accuracy (%) | macro-F1 (%) | error |", "| --- | --- | --- | --- |"]
    for run in report["runs"]:
        lines.append(
            f"| {run['seed']} | {_percent(run['accuracy'], None)} | {_percent(run['macro_f1'], None)} "
            f"| {run['error'] or ''} |"
        )
    return "\n".join(lines) + "\n"


def summarize_reports(root: Path) -> str:
    """Comparison table over every report.json below ``root``, sorted by experiment name."""
    reports = sorted((load_report(path) for path in Path(root).rglob(REPORT_FILE)), key=lambda r: r["name"])
    lines = [
        "| experiment | paradigm | model | accuracy (%) | macro-F1 (%) | seeds |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for report in reports:
        metrics = report["metrics"]
        lines.append(
            f"| {report['name']} | {report['paradigm']} | {report['model']} "
            f"| {_percent(metrics['accuracy'], metrics['accuracy_std'])} "
            f"| {_percent(metrics.get('macro_f1'), metrics.get('macro_f1_std'))} | {metrics['seeds']} |"
        )
    return "\n".join(lines) + "\n"


# --- modality ablation ----------------------------------------------------


@dataclass(slots=True)
class AblationTable:
    seeds: tuple[int, ...]
    cells: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def mean(self, model: str, mode: str) -> float:
        return mean_std(self.cells[model][mode])[0]

    def std(self, model: str, mode: str) -> float | None:
        return mean_std(self.cells[model][mode])[1]

    def to_dict(self) -> dict[str, Any]:
        table: dict[str, Any] = {}
        for model, row in self.cells.items():
            table[model] = {}
            for mode, values in row.items():
                mean, std = mean_std(values)
                entry: dict[str, Any] = {"mean": mean}
                if std is not None:
                    entry["std"] = std
                table[model][mode] = entry
        return {"seeds": list(self.seeds), "table": table}

    def to_markdown(self) -> str:
        with_std = len(self.seeds) > 1
        header = ["model", *(f"{mode} (%)" for mode in ABLATION_MODES)]
        if with_std:
            header += [f"{mode} std" for mode in ABLATION_MODES]
        lines = ["| " + " | ".join(header) + " |", "| " + " | ".join("---" for _ in header) + " |"]
        for model, row in self.cells.items():
            stats = [mean_std(row[mode]) for mode in ABLATION_MODES]
            cells = [model, *(f"{100 * mean:.2f}" for mean, _ in stats)]
            if with_std:
                cells += [f"{100 * (std or 0.0):.2f}" for _, std in stats]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _ablation_inputs(graph: MultimodalGraph, model_kind: str, mode: str) -> Features:
    if model_kind in MULTIMODAL_MODELS:
        text = modality_matrix(graph, "text")
        image = modality_matrix(graph, "image")
        if mode == "text":
            return (text, np.zeros_like(image))
        if mode == "image":
            return (np.zeros_like(text), image)
        return (text, image)
    fusion = {"text": "text_only", "image": "image_only", "text+image": "concat"}[mode]
    return fuse_features(graph, fusion)


def modality_ablation(
    graph: MultimodalGraph,
    model_kinds: Sequence[str] = GNN_MODELS,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    *,
    gnn: GnnConfig | None = None,
    split: SplitAssignment | None = None,
) -> AblationTable:
    """Test accuracy per model and modality setting; each seed draws its own split unless one is given."""
    for modality in ("text", "image"):
        if not graph.has_modality(modality):
            raise ModalityUnavailable(f"modality ablation needs both modalities; {modality} is missing")
    template = gnn or GnnConfig()
    table = AblationTable(seeds=tuple(int(s) for s in seeds))
    for model_kind in model_kinds:
        cfg = replace(template, model=model_kind)
        row: dict[str, list[float]] = {}
        for mode in ABLATION_MODES:
            features = _ablation_inputs(graph, model_kind, mode)
            scores: list[float] = []
            for seed in table.seeds:
                part = split or split_nodes(graph, seed=seed)
                trained = train_node_classifier(graph, features, part, replace(cfg, seed=seed))
                scores.append(trained.metrics.test_accuracy)
            row[mode] = scores
            logger.info(
                "ablation cell", extra={"model": cfg.label, "mode": mode, "mean_accuracy": float(np.mean(scores))}
            )
        table.cells[cfg.label] = row
    return table
