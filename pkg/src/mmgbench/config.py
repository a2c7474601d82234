"""Configuration and project paths for the benchmark harness."""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib  # type: ignore[no-redef]
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from mmgbench.errors import ConfigInvalid, DegenerateBatch

PACKAGE_ROOT = Path(__file__).resolve().parent
REPO_ROOT = PACKAGE_ROOT.parents[1]
ARTIFACTS_DIR = REPO_ROOT / "artifacts"
DOCS_DIR = REPO_ROOT / "docs"

TOKEN_ENV_VAR = "MMGBENCH_API_TOKEN"
CONFIG_SECTIONS: tuple[str, ...] = (
    "dataset",
    "experiment",
    "client",
    "split",
    "gnn",
    "encoder",
    "aligner",
    "predictor",
)

DOMAINS: tuple[str, ...] = ("movies", "toys", "grocery", "cds", "arts", "reddit")
MODALITIES: tuple[str, ...] = ("text", "image")
PARADIGMS: tuple[str, ...] = ("encoder", "aligner", "predictor")
GNN_MODELS: tuple[str, ...] = ("mlp", "gcn", "sage", "mmgcn", "mgat")
MULTIMODAL_MODELS: tuple[str, ...] = ("mmgcn", "mgat")
STRUCTURE_MODES: tuple[str, ...] = ("none", "text", "image", "both")
ENCODER_VARIANTS: tuple[str, ...] = ("pretrained", "finetuned", "structure_aware")
FUSION_MODES: tuple[str, ...] = ("text_only", "image_only", "concat")

# Ingestion targets for the six benchmark datasets: nodes, edges, classes.
DATASET_STATS: dict[str, tuple[int, int, int]] = {
    "movies": (16_672, 218_390, 19),
    "toys": (20_695, 126_886, 18),
    "grocery": (84_379, 693_154, 20),
    "arts": (28_195, 197_428, 7),
    "cds": (36_272, 844_878, 15),
    "reddit": (99_638, 1_167_188, 50),
}


@dataclass(slots=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.lr > 0.0:
            raise ConfigInvalid(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigInvalid(f"{name} must lie in (0, 1), got {value}")
        if not self.eps > 0.0:
            raise ConfigInvalid(f"eps must be positive, got {self.eps}")


@dataclass(slots=True)
class ContrastiveConfig:
    """Contrastive fine-tuning settings for the projection heads."""

    tau: float = 0.5
    m: int = 5
    batch_size: int = 16
    lr: float = 1e-5
    epochs: int = 1
    seed: int = 0
    d_proj: int | None = None

    def validate(self) -> None:
        if not self.tau > 0.0:
            raise ConfigInvalid(f"tau must be positive, got {self.tau}")
        if self.m < 1:
            raise ConfigInvalid(f"m must be >= 1, got {self.m}")
        if self.batch_size < 2:
            raise DegenerateBatch(f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigInvalid(f"epochs must be >= 0, got {self.epochs}")
        if self.d_proj is not None and self.d_proj < 1:
            raise ConfigInvalid(f"d_proj must be >= 1, got {self.d_proj}")
        self.optim().validate()

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr)


@dataclass(slots=True)
class GnnConfig:
    model: str = "gcn"
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.2
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.model not in GNN_MODELS:
            raise ConfigInvalid(f"unknown model {self.model!r}; expected one of {GNN_MODELS}")
        if self.layers < 1:
            raise ConfigInvalid(f"layers must be >= 1, got {self.layers}")
        if self.hidden < 1:
            raise ConfigInvalid(f"hidden must be >= 1, got {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigInvalid(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 0:
            raise ConfigInvalid(f"epochs must be >= 0, got {self.epochs}")
        OptimConfig(lr=self.lr).validate()

    @property
    def label(self) -> str:
        return f"{self.model}-lite" if self.model in MULTIMODAL_MODELS else self.model


@dataclass(slots=True)
class StructureSelectSpec:
    k: int = 3
    h: int = 1
    similarity_features: str = "fused"

    def validate(self) -> None:
        if self.k < 1 or self.h < 1:
            raise ConfigInvalid(f"structure selection needs k >= 1 and h >= 1, got k={self.k} h={self.h}")
        if self.similarity_features not in ("text", "image", "fused"):
            raise ConfigInvalid(f"unknown similarity features {self.similarity_features!r}")


@dataclass(slots=True)
class ClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model_name: str = "qwen-vl-7b"
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 1.0
    temperature: float = 0.0
    max_tokens: int = 64
    concurrency_limit: int = 4

    def validate(self) -> None:
        if self.max_retries < 0:
            raise ConfigInvalid(f"max_retries must be >= 0, got {self.max_retries}")
        if self.concurrency_limit < 1:
            raise ConfigInvalid(f"concurrency_limit must be >= 1, got {self.concurrency_limit}")
        if self.timeout_s <= 0.0 or self.backoff_base_s < 0.0:
            raise ConfigInvalid("timeout_s must be positive and backoff_base_s non-negative")
        if self.max_tokens < 1:
            raise ConfigInvalid(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(slots=True)
class DatasetConfig:
    nodes: Path
    edges: Path
    classes: Path
    embeddings: dict[str, Path] = field(default_factory=dict)
    domain: str = "movies"
    name: str | None = None
    token_dir: Path | None = None

    def validate(self) -> None:
        for path in (self.nodes, self.edges, self.classes, *self.embeddings.values()):
            if not Path(path).exists():
                raise ConfigInvalid(f"referenced file does not exist: {path}")
        if self.token_dir is not None and not Path(self.token_dir).is_dir():
            raise ConfigInvalid(f"referenced directory does not exist: {self.token_dir}")
        unknown = set(self.embeddings) - set(MODALITIES)
        if unknown:
            raise ConfigInvalid(f"unknown embedding modalities: {sorted(unknown)}")
        if self.domain not in DOMAINS:
            raise ConfigInvalid(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")


@dataclass(slots=True)
class SplitConfig:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0


@dataclass(slots=True)
class EncoderSettings:
    variant: str = "pretrained"
    fusion: str = "concat"
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def validate(self) -> None:
        if self.variant not in ENCODER_VARIANTS:
            raise ConfigInvalid(f"unknown encoder variant {self.variant!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigInvalid(f"unknown fusion mode {self.fusion!r}")
        if self.variant != "pretrained":
            self.contrastive.validate()


@dataclass(slots=True)
class AlignerSettings:
    mode: str = "latent"
    structural: bool = False
    neighbor_count: int = 5
    summary_embeddings: Path | None = None

    def validate(self) -> None:
        if self.mode not in ("latent", "prompt"):
            raise ConfigInvalid(f"unknown aligner mode {self.mode!r}")
        if self.neighbor_count < 1:
            raise ConfigInvalid(f"neighbor_count must be >= 1, got {self.neighbor_count}")
        if self.summary_embeddings is not None and not Path(self.summary_embeddings).exists():
            raise ConfigInvalid(f"referenced file does not exist: {self.summary_embeddings}")


@dataclass(slots=True)
class PredictorSettings:
    structure: str = "none"
    icl_budget: int = 0
    retry_unparseable: bool = False
    export_sft: bool = False
    eval_split: str = "test"
    max_nodes: int | None = None
    select: StructureSelectSpec = field(default_factory=StructureSelectSpec)

    def validate(self) -> None:
        if self.structure not in STRUCTURE_MODES:
            raise ConfigInvalid(f"unknown structure mode {self.structure!r}")
        if self.icl_budget < 0:
            raise ConfigInvalid(f"icl_budget must be >= 0, got {self.icl_budget}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigInvalid(f"unknown eval split {self.eval_split!r}")
        self.select.validate()


@dataclass(slots=True)
class ExperimentConfig:
    dataset: DatasetConfig
    name: str = "experiment"
    paradigm: str = "encoder"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: Path = ARTIFACTS_DIR
    client_kind: str = "mock"
    cache_dir: Path | None = None
    mock_rules: Path | None = None
    mock_default: str = "unknown"
    split: SplitConfig = field(default_factory=SplitConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    aligner: AlignerSettings = field(default_factory=AlignerSettings)
    predictor: PredictorSettings = field(default_factory=PredictorSettings)
    client: ClientConfig = field(default_factory=ClientConfig)

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ConfigInvalid(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        if not self.seeds:
            raise ConfigInvalid("at least one seed is required")
        if self.client_kind not in ("mock", "http"):
            raise ConfigInvalid(f"unknown client kind {self.client_kind!r}")
        if self.mock_rules is not None and not Path(self.mock_rules).exists():
            raise ConfigInvalid(f"referenced file does not exist: {self.mock_rules}")
        self.dataset.validate()
        self.gnn.validate()
        self.encoder.validate()
        self.aligner.validate()
        self.predictor.validate()
        self.client.validate()


def dataclass_to_dict(value: Any) -> dict[str, Any]:
    data = asdict(value)
    return _stringify_paths(data)


def _stringify_paths(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {key: _stringify_paths(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_stringify_paths(item) for item in value]
    return value


def _path(base: Path, value: Any) -> Path:
    path = Path(str(value)).expanduser()
    return path if path.is_absolute() else (base / path)


def _optional_path(base: Path, value: Any) -> Path | None:
    return None if value is None else _path(base, value)


def _section(data: dict[str, Any], key: str) -> dict[str, Any]:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigInvalid(f"[{key}] must be a table")
    return value


def _known(table: dict[str, Any], allowed: tuple[str, ...], where: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigInvalid(f"unknown keys {unknown} at {where}")


def _fill(instance: Any, table: dict[str, Any], *, section: str, skip: tuple[str, ...] = ()) -> Any:
    for key, value in table.items():
        if key in skip:
            continue
        if key not in type(instance).__dataclass_fields__:
            raise ConfigInvalid(f"unknown key {key!r} in [{section}]")
        current = getattr(instance, key)
        if isinstance(current, tuple):
            value = tuple(value)
        setattr(instance, key, value)
    return instance


def parse_experiment_config(data: dict[str, Any], *, base_dir: Path) -> ExperimentConfig:
    _known(data, CONFIG_SECTIONS, "top level")
    dataset_table = _section(data, "dataset")
    _known(dataset_table, ("nodes", "edges", "classes", "embeddings", "domain", "name", "token_dir"), "[dataset]")
    try:
        dataset = DatasetConfig(
            nodes=_path(base_dir, dataset_table["nodes"]),
            edges=_path(base_dir, dataset_table["edges"]),
            classes=_path(base_dir, dataset_table["classes"]),
            embeddings={
                str(key): _path(base_dir, value) for key, value in _section(dataset_table, "embeddings").items()
            },
            domain=str(dataset_table.get("domain", "movies")),
            name=dataset_table.get("name"),
            token_dir=_optional_path(base_dir, dataset_table.get("token_dir")),
        )
    except KeyError as exc:
        raise ConfigInvalid(f"[dataset] is missing required key {exc.args[0]!r}") from exc

    experiment = _section(data, "experiment")
    _known(experiment, ("name", "paradigm", "seeds", "output_dir"), "[experiment]")
    config = ExperimentConfig(
        dataset=dataset,
        name=str(experiment.get("name", "experiment")),
        paradigm=str(experiment.get("paradigm", "encoder")),
        seeds=tuple(int(seed) for seed in experiment.get("seeds", (0, 1, 2, 3, 4))),
        output_dir=_path(base_dir, experiment.get("output_dir", ARTIFACTS_DIR)),
    )

    client_table = _section(data, "client")
    config.client_kind = str(client_table.get("kind", "mock"))
    config.cache_dir = _optional_path(base_dir, client_table.get("cache_dir"))
    config.mock_rules = _optional_path(base_dir, client_table.get("mock_rules"))
    config.mock_default = str(client_table.get("mock_default", "unknown"))
    _fill(config.client, client_table, section="client", skip=("kind", "cache_dir", "mock_rules", "mock_default"))

    split_table = _section(data, "split")
    _fill(config.split, split_table, section="split")
    _fill(config.gnn, _section(data, "gnn"), section="gnn")

    encoder_table = _section(data, "encoder")
    _fill(config.encoder, encoder_table, section="encoder", skip=("contrastive",))
    _fill(config.encoder.contrastive, _section(encoder_table, "contrastive"), section="encoder.contrastive")

    aligner_table = _section(data, "aligner")
    _fill(config.aligner, aligner_table, section="aligner", skip=("summary_embeddings",))
    config.aligner.summary_embeddings = _optional_path(base_dir, aligner_table.get("summary_embeddings"))

    predictor_table = _section(data, "predictor")
    _fill(config.predictor, predictor_table, section="predictor", skip=("select",))
    _fill(config.predictor.select, _section(predictor_table, "select"), section="predictor.select")
    return config


def load_experiment_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file does not exist: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    return parse_experiment_config(data, base_dir=path.resolve().parent)
