"""Command-line surface: ``mmgbench <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

from mmgbench.aligner import ArtifactStore, run_alignment
from mmgbench.config import ARTIFACTS_DIR, GNN_MODELS, ExperimentConfig, dataclass_to_dict, load_experiment_config
from mmgbench.encoders import encode_features, load_heads, save_heads
from mmgbench.errors import ConfigInvalid, MmgbenchError, ValidationError
from mmgbench.gnn import save_model, train_node_classifier
from mmgbench.graph import SplitAssignment, split_nodes, write_graph_files
from mmgbench.harness import (
    ingest_dataset,
    load_experiment_graph,
    modality_ablation,
    model_inputs,
    run_batch,
    run_experiment,
    summarize_reports,
)
from mmgbench.logging_utils import configure_logging
from mmgbench.metrics import accuracy, confusion_matrix, macro_f1, structure_gain_by_dataset
from mmgbench.predictor import export_sft_dataset, predict_nodes
from mmgbench.synthetic import two_block_graph, two_cluster_graph, write_movies_fixture, xor_multimodal_graph
from mmgbench.tokens import POOLING_MODES, TOKEN_MODALITIES, TokenDirectory, export_structure_tokens
from mmgbench.vlm_client import build_client, load_mock_rules

logger = logging.getLogger("mmgbench.cli")

SYNTHETIC_KINDS = ("two-cluster", "xor", "two-block", "movies")


def _config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        raise ConfigInvalid(f"`{args.command}` needs --config")
    cfg = load_experiment_config(Path(args.config))
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    if args.out is not None:
        cfg.output_dir = Path(args.out)
    if args.client is not None:
        cfg.client_kind = args.client
    if args.cache_dir is not None:
        cfg.cache_dir = Path(args.cache_dir)
    cfg.validate()
    return cfg


def _out_dir(args: argparse.Namespace, cfg: ExperimentConfig | None = None) -> Path:
    if args.out is not None:
        path = Path(args.out)
    elif cfg is not None:
        path = Path(cfg.output_dir) / cfg.name
    else:
        path = ARTIFACTS_DIR
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _split(args: argparse.Namespace, cfg: ExperimentConfig, graph: Any) -> SplitAssignment:
    if getattr(args, "split", None) is not None:
        return SplitAssignment.load(Path(args.split))
    seed = cfg.split.seed if args.seed is None else args.seed
    return split_nodes(graph, cfg.split.ratios, seed)


def _client(cfg: ExperimentConfig) -> Any:
    return build_client(
        cfg.client_kind,
        cfg.client,
        cfg.cache_dir,
        rules=load_mock_rules(cfg.mock_rules),
        default=cfg.mock_default,
    )


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    summary = ingest_dataset(cfg.dataset, out / "normalized" if args.normalize else None)
    path = _write_json(out / "ingest_report.json", summary)
    report = summary["load_report"]
    print(
        f"ingest_complete nodes={report['nodes']} edges={report['edges']} classes={report['classes']} "
        f"self_loops={report['dropped_self_loops']} duplicates={report['dropped_duplicates']} report={path}"
    )
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    cfg = _config(args)
    graph = load_experiment_graph(cfg.dataset)
    split = _split(args, cfg, graph)
    path = split.save(_out_dir(args, cfg) / "split.json")
    print(f"split_complete train={len(split.train)} val={len(split.val)} test={len(split.test)} path={path}")
    return 0


def cmd_train_encoder(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if cfg.encoder.variant == "pretrained":
        raise ConfigInvalid("train-encoder needs encoder.variant = finetuned or structure_aware")
    graph = load_experiment_graph(cfg.dataset)
    cfg.encoder.contrastive.seed = cfg.seeds[0]
    _, heads, report = encode_features(graph, cfg.encoder)
    assert heads is not None and report is not None
    out = _out_dir(args, cfg) / "encoder"
    save_heads(heads, out, config=cfg.encoder.contrastive)
    _write_json(out / "encoder_report.json", report.to_dict())
    print(
        f"train_encoder_complete variant={cfg.encoder.variant} steps={report.steps} "
        f"cosine_before={report.cosine_before:.4f} cosine_after={report.cosine_after:.4f} heads={out}"
    )
    return 0


def cmd_train_gnn(args: argparse.Namespace) -> int:
    cfg = _config(args)
    graph = load_experiment_graph(cfg.dataset)
    heads = load_heads(Path(args.heads)) if args.heads is not None else None
    features = model_inputs(graph, cfg.gnn.model, cfg.encoder.fusion, heads)
    split = _split(args, cfg, graph)
    cfg.gnn.seed = cfg.seeds[0]
    trained = train_node_classifier(graph, features, split, cfg.gnn)
    path = save_model(trained, _out_dir(args, cfg) / "gnn")
    print(
        f"train_gnn_complete model={trained.label} best_epoch={trained.metrics.best_epoch} "
        f"val_accuracy={trained.metrics.val_accuracy:.4f} test_accuracy={trained.metrics.test_accuracy:.4f} "
        f"model_file={path}"
    )
    return 0


def cmd_align(args: argparse.Namespace) -> int:
    cfg = _config(args)
    graph = load_experiment_graph(cfg.dataset)
    nodes = list(range(graph.num_nodes))
    if args.max_nodes is not None:
        nodes = nodes[: args.max_nodes]
    store = ArtifactStore(_out_dir(args, cfg) / "aligner")
    run = run_alignment(
        _client(cfg),
        graph,
        nodes,
        store,
        structural=cfg.aligner.structural,
        neighbor_count=cfg.aligner.neighbor_count,
        seed=cfg.split.seed,
    )
    print(f"align_complete nodes={len(nodes)} described={run.described} errors={len(run.errors)} store={store.root}")
    return 0 if not run.errors else 2


def _artifacts(args: argparse.Namespace) -> Any:
    if getattr(args, "artifacts", None) is None:
        return None
    return ArtifactStore(Path(args.artifacts)).load_all()


def cmd_export_sft(args: argparse.Namespace) -> int:
    cfg = _config(args)
    graph = load_experiment_graph(cfg.dataset)
    split = _split(args, cfg, graph)
    path = _out_dir(args, cfg) / "sft.jsonl"
    count = export_sft_dataset(graph, split, cfg.predictor, path, artifacts=_artifacts(args))
    print(f"export_sft_complete records={count} structure={cfg.predictor.structure} path={path}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _config(args)
    graph = load_experiment_graph(cfg.dataset)
    split = _split(args, cfg, graph)
    nodes = [int(v) for v in split.part(cfg.predictor.eval_split)]
    if cfg.predictor.max_nodes is not None:
        nodes = nodes[: cfg.predictor.max_nodes]
    run = predict_nodes(
        _client(cfg), graph, nodes, graph.classes, cfg.predictor, artifacts=_artifacts(args), split=split
    )
    payload = {"classes": graph.classes, "settings": dataclass_to_dict(cfg.predictor), **run.to_dict()}
    path = _write_json(_out_dir(args, cfg) / "predictions.json", payload)
    print(
        f"predict_complete nodes={len(run.nodes)} accuracy={run.accuracy:.4f} "
        f"unparseable_rate={run.unparseable_rate:.4f} errors={len(run.errors)} predictions={path}"
    )
    return 0


def cmd_export_tokens(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if cfg.dataset.token_dir is None:
        raise ConfigInvalid("export-tokens needs dataset.token_dir")
    graph = load_experiment_graph(cfg.dataset)
    nodes = list(range(graph.num_nodes))
    if args.max_nodes is not None:
        nodes = nodes[: args.max_nodes]
    path = export_structure_tokens(
        graph,
        nodes,
        cfg.predictor.select,
        args.modality,
        TokenDirectory(cfg.dataset.token_dir),
        _out_dir(args, cfg) / "tokens",
        pooling=args.pooling,
    )
    print(f"export_tokens_complete nodes={len(nodes)} modality={args.modality} pooling={args.pooling} manifest={path}")
    return 0


def _read_json(source: Path, what: str) -> Any:
    if not source.exists():
        raise ConfigInvalid(f"{what} file does not exist: {source}")
    try:
        return json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{what} file {source} is not valid JSON: {exc}") from exc


def cmd_evaluate(args: argparse.Namespace) -> int:
    source = Path(args.predictions)
    data = _read_json(source, "predictions")
    try:
        num_classes = len(data["classes"])
        preds = [int(p) for p in data["predictions"]]
        gold = [int(g) for g in data["gold"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"predictions file {source} needs classes, predictions and gold lists: {exc!r}") from exc
    summary = {
        "accuracy": accuracy(preds, gold),
        "macro_f1": macro_f1(preds, gold, num_classes),
        "confusion": confusion_matrix(preds, gold, num_classes).tolist(),
        "classes": data["classes"],
    }
    path = _write_json(source.with_name("evaluation.json"), summary)
    print(f"evaluate_complete accuracy={summary['accuracy']:.4f} macro_f1={summary['macro_f1']:.4f} path={path}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    if args.summarize is not None:
        sys.stdout.write(summarize_reports(Path(args.summarize)))
        return 0
    if args.batch:
        configs = []
        for path in args.batch:
            cfg = load_experiment_config(Path(path))
            if args.out is not None:
                cfg.output_dir = Path(args.out)
            configs.append(cfg)
        outcomes = run_batch(configs, max_workers=args.workers)
        failed = sorted(name for name, outcome in outcomes.items() if isinstance(outcome, str))
        print(f"report_complete experiments={len(outcomes)} failed={len(failed)}")
        return 0 if not failed else 2
    cfg = _config(args)
    report = run_experiment(cfg)
    accuracy_value = report.metrics["accuracy"]
    shown = "n/a" if accuracy_value is None else f"{accuracy_value:.4f}"
    print(
        f"report_complete name={report.name} paradigm={report.paradigm} model={report.model} "
        f"accuracy={shown} failed_seeds={len(report.errors)} out={Path(cfg.output_dir) / cfg.name}"
    )
    return 0 if not report.errors else 2


def cmd_ablate_modality(args: argparse.Namespace) -> int:
    cfg = _config(args)
    graph = load_experiment_graph(cfg.dataset)
    table = modality_ablation(graph, args.models, cfg.seeds, gnn=cfg.gnn)
    out = _out_dir(args, cfg)
    path = _write_json(out / "ablation.json", table.to_dict())
    (out / "ablation.md").write_text(table.to_markdown(), encoding="utf-8")
    print(f"ablate_modality_complete models={len(args.models)} seeds={len(cfg.seeds)} table={path}")
    return 0


def cmd_structure_gain(args: argparse.Namespace) -> int:
    source = Path(args.results)
    try:
        gains = structure_gain_by_dataset(_read_json(source, "results"))
    except (KeyError, TypeError, AttributeError) as exc:
        raise ConfigInvalid(f"results file {source} has a malformed entry: {exc!r}") from exc
    path = _write_json(_out_dir(args) / "structure_gain.json", gains)
    rendered = " ".join(f"{dataset}={gain:+.4f}" for dataset, gain in gains.items())
    print(f"structure_gain_complete {rendered} path={path}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    if args.kind == "movies":
        paths = write_movies_fixture(out, num_nodes=args.nodes or 190, seed=seed)
        print(f"synth_complete kind=movies nodes={paths.nodes} manifest={paths.manifest}")
        return 0
    if args.kind == "two-cluster":
        graph = two_cluster_graph(args.nodes or 200, seed=seed)
    elif args.kind == "xor":
        graph = xor_multimodal_graph(args.nodes or 1000, seed=seed)
    else:
        graph = two_block_graph((args.nodes or 128) // 2, seed=seed)
    paths = write_graph_files(graph, out)
    print(f"synth_complete kind={args.kind} nodes={graph.num_nodes} edges={graph.num_edges} dir={out} files={len(paths)}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "train-encoder": cmd_train_encoder,
    "train-gnn": cmd_train_gnn,
    "align": cmd_align,
    "export-sft": cmd_export_sft,
    "predict": cmd_predict,
    "export-tokens": cmd_export_tokens,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "ablate-modality": cmd_ablate_modality,
    "structure-gain": cmd_structure_gain,
    "synth": cmd_synth,
}


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="experiment TOML file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--client", choices=["mock", "http"], default=None)
    common.add_argument("--cache-dir", default=None)
    common.add_argument("--log-level", default="INFO")
    common.add_argument("--log-file", default=None)

    parser = argparse.ArgumentParser(prog="mmgbench", description="Multimodal graph learning benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)
    ingest = sub.add_parser("ingest", parents=[common], help="validate and normalize a dataset")
    ingest.add_argument("--normalize", action="store_true", help="also write a normalized copy")
    sub.add_parser("split", parents=[common], help="write a train/val/test split")
    sub.add_parser("train-encoder", parents=[common], help="fine-tune projection heads")
    train_gnn = sub.add_parser("train-gnn", parents=[common], help="train a node classifier")
    train_gnn.add_argument("--heads", default=None, help="directory written by train-encoder")
    train_gnn.add_argument("--split", default=None)
    align = sub.add_parser("align", parents=[common], help="generate descriptions and summaries")
    align.add_argument("--max-nodes", type=int, default=None)
    for name in ("export-sft", "predict"):
        command = sub.add_parser(name, parents=[common])
        command.add_argument("--split", default=None)
        command.add_argument("--artifacts", default=None, help="aligner artifact directory")
    tokens = sub.add_parser("export-tokens", parents=[common], help="write pooled neighbor token blocks")
    tokens.add_argument("--modality", choices=TOKEN_MODALITIES, default="both")
    tokens.add_argument("--pooling", choices=POOLING_MODES, default="per_neighbor")
    tokens.add_argument("--max-nodes", type=int, default=None)
    evaluate = sub.add_parser("evaluate", parents=[common], help="score a predictions file")
    evaluate.add_argument("--predictions", required=True)
    report = sub.add_parser("report", parents=[common], help="run experiments and write reports")
    report.add_argument("--batch", nargs="*", default=None, help="several experiment configs")
    report.add_argument("--workers", type=int, default=1)
    report.add_argument("--summarize", default=None, help="print a table over reports in a directory")
    ablate = sub.add_parser("ablate-modality", parents=[common])
    ablate.add_argument("--models", nargs="+", choices=GNN_MODELS, default=list(GNN_MODELS))
    gain = sub.add_parser("structure-gain", parents=[common])
    gain.add_argument("--results", required=True, help="JSON {dataset: {setting: {accuracy, structure_aware}}}")
    synth = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    synth.add_argument("--kind", choices=SYNTHETIC_KINDS, default="movies")
    synth.add_argument("--nodes", type=int, default=None)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    configure_logging(args.log_level, log_file=Path(args.log_file) if args.log_file else None)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    except MmgbenchError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
