"""GNN node classifiers over fused or per-modality features.

Every model is a static tape of layer objects. Each layer caches what its
backward needs during ``forward`` and accumulates parameter gradients during
``backward``; training is full-batch Adam with best-validation snapshotting.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp

from mmgbench.config import MULTIMODAL_MODELS, GnnConfig, OptimConfig, dataclass_to_dict
from mmgbench.errors import EmptyTrainSet, ModalityUnavailable, ShapeMismatch, ValidationError
from mmgbench.graph import MultimodalGraph, SplitAssignment
from mmgbench.numerics import (
    Parameter,
    adam_step,
    check_finite,
    leaky_relu,
    leaky_relu_backward,
    load_tensor,
    relu,
    save_tensor,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    uniform_init,
)

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


def normalized_adjacency(adjacency: sp.spmatrix | np.ndarray) -> sp.csr_matrix:
    """D~^{-1/2} (A + I) D~^{-1/2}."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    a_tilde = a + sp.identity(a.shape[0], dtype=np.float64, format="csr")
    degree = np.asarray(a_tilde.sum(axis=1)).reshape(-1)
    scale = sp.diags(1.0 / np.sqrt(degree))
    return sp.csr_matrix(scale @ a_tilde @ scale)


def mean_adjacency(adjacency: sp.spmatrix | np.ndarray) -> sp.csr_matrix:
    """Row-normalized A; isolated nodes get an all-zero row."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    degree = np.asarray(a.sum(axis=1)).reshape(-1)
    inverse = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    return sp.csr_matrix(sp.diags(inverse) @ a)


@dataclass(slots=True)
class GraphOperators:
    adjacency: sp.csr_matrix
    normalized: sp.csr_matrix
    mean: sp.csr_matrix
    rows: np.ndarray
    cols: np.ndarray

    @classmethod
    def from_adjacency(cls, adjacency: sp.spmatrix | np.ndarray) -> GraphOperators:
        a = sp.csr_matrix(adjacency, dtype=np.float64)
        a.sort_indices()
        rows = np.repeat(np.arange(a.shape[0]), np.diff(a.indptr))
        return cls(
            adjacency=a,
            normalized=normalized_adjacency(a),
            mean=mean_adjacency(a),
            rows=rows,
            cols=a.indices.astype(np.int64),
        )

    @property
    def num_nodes(self) -> int:
        return int(self.adjacency.shape[0])


def _wide(x: Any) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_rows(x: np.ndarray, num_nodes: int) -> None:
    if x.ndim != 2 or x.shape[0] != num_nodes:
        raise ShapeMismatch(f"features must have {num_nodes} rows, got shape {x.shape}")


def _weight(w: Parameter | np.ndarray) -> np.ndarray:
    return _wide(w.value if isinstance(w, Parameter) else w)


def gcn_layer(
    x: np.ndarray, adjacency: sp.spmatrix | np.ndarray, w: Parameter | np.ndarray, *, final: bool = False
) -> np.ndarray:
    a_hat = normalized_adjacency(adjacency)
    _check_rows(np.asarray(x), a_hat.shape[0])
    weight = _weight(w)
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"feature dim {x.shape[1]} != weight rows {weight.shape[0]}")
    out = a_hat @ (_wide(x) @ weight)
    return out if final else relu(out)


def sage_layer(
    x: np.ndarray,
    adjacency: sp.spmatrix | np.ndarray,
    w_self: Parameter | np.ndarray,
    w_neigh: Parameter | np.ndarray,
    *,
    final: bool = False,
) -> np.ndarray:
    a_mean = mean_adjacency(adjacency)
    _check_rows(np.asarray(x), a_mean.shape[0])
    ws, wn = _weight(w_self), _weight(w_neigh)
    if x.shape[1] != ws.shape[0] or ws.shape != wn.shape:
        raise ShapeMismatch(f"weights {ws.shape}/{wn.shape} incompatible with features {x.shape}")
    out = _wide(x) @ ws + (a_mean @ _wide(x)) @ wn
    return out if final else relu(out)


def attention_weights(
    z: np.ndarray, a_left: np.ndarray, a_right: np.ndarray, adjacency: sp.spmatrix | GraphOperators
) -> sp.csr_matrix:
    """alpha[v, u] = softmax over u in N(v) of LeakyReLU(a_left . z_v + a_right . z_u)."""
    ops = adjacency if isinstance(adjacency, GraphOperators) else GraphOperators.from_adjacency(adjacency)
    alpha, _ = _edge_softmax(_wide(z), _wide(a_left), _wide(a_right), ops)
    return sp.csr_matrix((alpha, ops.adjacency.indices, ops.adjacency.indptr), shape=ops.adjacency.shape)


def _edge_softmax(
    z: np.ndarray, a_left: np.ndarray, a_right: np.ndarray, ops: GraphOperators
) -> tuple[np.ndarray, np.ndarray]:
    raw = (z @ a_left)[ops.rows] + (z @ a_right)[ops.cols]
    scores = leaky_relu(raw, LEAKY_SLOPE)
    peak = np.full(ops.num_nodes, -np.inf)
    np.maximum.at(peak, ops.rows, scores)
    shifted = np.exp(scores - peak[ops.rows]) if scores.size else scores
    denom = np.bincount(ops.rows, weights=shifted, minlength=ops.num_nodes)
    alpha = shifted / denom[ops.rows] if scores.size else shifted
    return alpha, raw


# --- layers ---------------------------------------------------------------


class Layer:
    def forward(self, x: np.ndarray, ops: GraphOperators, *, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return []


class Dropout(Layer):
    def __init__(self, rate: float, rng: np.random.Generator) -> None:
        self.rate = rate
        self.rng = rng
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, ops: GraphOperators, *, training: bool) -> np.ndarray:
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad if self._mask is None else grad * self._mask


class Relu(Layer):
    def __init__(self) -> None:
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray, ops: GraphOperators, *, training: bool) -> np.ndarray:
        self._x = x
        return relu(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        assert self._x is not None
        return np.where(self._x > 0.0, grad, 0.0)


class Linear(Layer):
    def __init__(self, w: Parameter, b: Parameter | None = None) -> None:
        self.w = w
        self.b = b
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray, ops: GraphOperators, *, training: bool) -> np.ndarray:
        self._x = _wide(x)
        out = self._x @ _wide(self.w.value)
        return out if self.b is None else out + _wide(self.b.value)[None, :]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        assert self._x is not None
        self.w.accumulate(self._x.T @ grad)
        if self.b is not None:
            self.b.accumulate(grad.sum(axis=0))
        return grad @ _wide(self.w.value).T

    def parameters(self) -> list[Parameter]:
        return [self.w] if self.b is None else [self.w, self.b]


class GcnConv(Layer):
    def __init__(self, w: Parameter) -> None:
        self.w = w
        self._x: np.ndarray | None = None
        self._ops: GraphOperators | None = None

    def forward(self, x: np.ndarray, ops: GraphOperators, *, training: bool) -> np.ndarray:
        _check_rows(x, ops.num_nodes)
        self._x, self._ops = _wide(x), ops
        return ops.normalized @ (self._x @ _wide(self.w.value))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        assert self._x is not None and self._ops is not None
        propagated = self._ops.normalized.T @ grad
        self.w.accumulate(self._x.T @ propagated)
        return propagated @ _wide(self.w.value).T

    def parameters(self) -> list[Parameter]:
        return [self.w]


class SageConv(Layer):
    def __init__(self, w_self: Parameter, w_neigh: Parameter) -> None:
        self.w_self = w_self
        self.w_neigh = w_neigh
        self._x: np.ndarray | None = None
        self._agg: np.ndarray | None = None
        self._ops: GraphOperators | None = None

    def forward(self, x: np.ndarray, ops: GraphOperators, *, training: bool) -> np.ndarray:
        _check_rows(x, ops.num_nodes)
        self._x, self._ops = _wide(x), ops
        self._agg = ops.mean @ self._x
        return self._x @ _wide(self.w_self.value) + self._agg @ _wide(self.w_neigh.value)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        assert self._x is not None and self._agg is not None and self._ops is not None
        self.w_self.accumulate(self._x.T @ grad)
        self.w_neigh.accumulate(self._agg.T @ grad)
        return grad @ _wide(self.w_self.value).T + self._ops.mean.T @ (grad @ _wide(self.w_neigh.value).T)

    def parameters(self) -> list[Parameter]:
        return [self.w_self, self.w_neigh]


class AttentionConv(Layer):
    """h_v = z_v + sum_u alpha_vu z_u with z = x W; the self term keeps isolated nodes informative."""

    def __init__(self, w: Parameter, a_left: Parameter, a_right: Parameter) -> None:
        self.w = w
        self.a_left = a_left
        self.a_right = a_right
        self._cache: dict[str, Any] = {}

    def forward(self, x: np.ndarray, ops: GraphOperators, *, training: bool) -> np.ndarray:
        _check_rows(x, ops.num_nodes)
        x = _wide(x)
        z = x @ _wide(self.w.value)
        alpha, raw = _edge_softmax(z, _wide(self.a_left.value), _wide(self.a_right.value), ops)
        weighted = sp.csr_matrix((alpha, ops.adjacency.indices, ops.adjacency.indptr), shape=ops.adjacency.shape)
        self._cache = {"x": x, "z": z, "alpha": alpha, "raw": raw, "weighted": weighted, "ops": ops}
        return z + weighted @ z

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, z, alpha, raw = self._cache["x"], self._cache["z"], self._cache["alpha"], self._cache["raw"]
        weighted: sp.csr_matrix = self._cache["weighted"]
        ops: GraphOperators = self._cache["ops"]
        a_left, a_right = _wide(self.a_left.value), _wide(self.a_right.value)

        d_z = grad + weighted.T @ grad
        d_alpha = np.sum(grad[ops.rows] * z[ops.cols], axis=1)
        row_dot = np.bincount(ops.rows, weights=alpha * d_alpha, minlength=ops.num_nodes)
        d_scores = alpha * (d_alpha - row_dot[ops.rows])
        d_raw = leaky_relu_backward(raw, d_scores, LEAKY_SLOPE)
        d_left = np.bincount(ops.rows, weights=d_raw, minlength=ops.num_nodes)
        d_right = np.bincount(ops.cols, weights=d_raw, minlength=ops.num_nodes)
        self.a_left.accumulate(z.T @ d_left)
        self.a_right.accumulate(z.T @ d_right)
        d_z = d_z + np.outer(d_left, a_left) + np.outer(d_right, a_right)
        self.w.accumulate(x.T @ d_z)
        return d_z @ _wide(self.w.value).T

    def parameters(self) -> list[Parameter]:
        return [self.w, self.a_left, self.a_right]


# --- models ---------------------------------------------------------------


class NodeClassifier:
    """Base tape; subclasses fill ``self.params`` in a fixed order."""

    kind = "base"
    num_inputs = 1

    def __init__(self, feature_dims: Sequence[int], num_classes: int, cfg: GnnConfig, dtype: type) -> None:
        self.feature_dims = tuple(int(d) for d in feature_dims)
        self.num_classes = num_classes
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}
        self._init_rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)

    def _matrix(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        self.params[name] = Parameter(uniform_init(self._init_rng, fan_in, fan_out, dtype=self.dtype))
        return self.params[name]

    def _vector(self, name: str, size: int, *, zero: bool = False) -> Parameter:
        bound = 1.0 / np.sqrt(max(size, 1))
        value = np.zeros(size) if zero else self._init_rng.uniform(-bound, bound, size=size)
        self.params[name] = Parameter(value.astype(self.dtype))
        return self.params[name]

    def _widths(self, d_in: int, out: int) -> list[tuple[int, int]]:
        dims = [d_in] + [self.cfg.hidden] * (self.cfg.layers - 1) + [out]
        return list(zip(dims[:-1], dims[1:], strict=True))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def check_inputs(self, inputs: Sequence[np.ndarray], ops: GraphOperators) -> None:
        if len(inputs) != self.num_inputs:
            raise ModalityUnavailable(f"{self.kind} expects {self.num_inputs} feature matrices, got {len(inputs)}")
        for x, dim in zip(inputs, self.feature_dims, strict=True):
            if x.ndim != 2 or x.shape[1] != dim:
                raise ShapeMismatch(f"{self.kind} was built for feature dim {dim}, got shape {x.shape}")
            if x.shape[0] != ops.num_nodes:
                if self.num_inputs > 1:
                    raise ModalityUnavailable(
                        f"modality matrix has {x.shape[0]} rows for a graph of {ops.num_nodes} nodes"
                    )
                raise ShapeMismatch(f"features must have {ops.num_nodes} rows, got {x.shape[0]}")

    def forward(self, inputs: Sequence[np.ndarray], ops: GraphOperators, *, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_logits: np.ndarray) -> None:
        raise NotImplementedError


class _Sequential(NodeClassifier):
    def __init__(self, feature_dims: Sequence[int], num_classes: int, cfg: GnnConfig, dtype: type) -> None:
        super().__init__(feature_dims, num_classes, cfg, dtype)
        self.layers: list[Layer] = []
        widths = self._widths(self.feature_dims[0], num_classes)
        for index, (fan_in, fan_out) in enumerate(widths):
            self.layers.append(Dropout(cfg.dropout, self.dropout_rng))
            self.layers.append(self._conv(index, fan_in, fan_out))
            if index < len(widths) - 1:
                self.layers.append(Relu())

    def _conv(self, index: int, fan_in: int, fan_out: int) -> Layer:
        raise NotImplementedError

    def forward(self, inputs: Sequence[np.ndarray], ops: GraphOperators, *, training: bool = False) -> np.ndarray:
        self.check_inputs(inputs, ops)
        h = _wide(inputs[0])
        for layer in self.layers:
            h = layer.forward(h, ops, training=training)
        return h

    def backward(self, grad_logits: np.ndarray) -> None:
        grad = _wide(grad_logits)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)


class MlpModel(_Sequential):
    kind = "mlp"

    def _conv(self, index: int, fan_in: int, fan_out: int) -> Layer:
        return Linear(self._matrix(f"layer{index}.w", fan_in, fan_out), self._vector(f"layer{index}.b", fan_out, zero=True))


class GcnModel(_Sequential):
    kind = "gcn"

    def _conv(self, index: int, fan_in: int, fan_out: int) -> Layer:
        return GcnConv(self._matrix(f"layer{index}.w", fan_in, fan_out))


class SageModel(_Sequential):
    kind = "sage"

    def _conv(self, index: int, fan_in: int, fan_out: int) -> Layer:
        return SageConv(
            self._matrix(f"layer{index}.w_self", fan_in, fan_out),
            self._matrix(f"layer{index}.w_neigh", fan_in, fan_out),
        )


class _TwoBranch(NodeClassifier):
    num_inputs = 2

    def __init__(self, feature_dims: Sequence[int], num_classes: int, cfg: GnnConfig, dtype: type) -> None:
        super().__init__(feature_dims, num_classes, cfg, dtype)
        hidden = cfg.hidden
        self.branches: dict[str, list[Layer]] = {}
        for modality, d_in in zip(("text", "image"), self.feature_dims, strict=True):
            layers: list[Layer] = []
            for index in range(cfg.layers):
                fan_in = d_in if index == 0 else hidden
                layers.append(Dropout(cfg.dropout, self.dropout_rng))
                layers.append(self._conv(modality, index, fan_in, hidden))
                layers.append(Relu())
            self.branches[modality] = layers
        self._build_fusion(hidden)
        self.classifier = Linear(
            self._matrix("classifier.w", hidden, num_classes), self._vector("classifier.b", num_classes, zero=True)
        )

    def _conv(self, modality: str, index: int, fan_in: int, fan_out: int) -> Layer:
        raise NotImplementedError

    def _build_fusion(self, hidden: int) -> None:
        raise NotImplementedError

    def _run_branch(self, modality: str, x: np.ndarray, ops: GraphOperators, training: bool) -> np.ndarray:
        h = _wide(x)
        for layer in self.branches[modality]:
            h = layer.forward(h, ops, training=training)
        return h

    def _back_branch(self, modality: str, grad: np.ndarray) -> None:
        for layer in reversed(self.branches[modality]):
            grad = layer.backward(grad)


class MmgcnLite(_TwoBranch):
    """Per-modality GCN stacks, linear projections to hidden, summed, then a classifier."""

    kind = "mmgcn"

    def _conv(self, modality: str, index: int, fan_in: int, fan_out: int) -> Layer:
        return GcnConv(self._matrix(f"{modality}.layer{index}.w", fan_in, fan_out))

    def _build_fusion(self, hidden: int) -> None:
        self.projections = {
            modality: Linear(self._matrix(f"{modality}.proj", hidden, hidden)) for modality in ("text", "image")
        }

    def forward(self, inputs: Sequence[np.ndarray], ops: GraphOperators, *, training: bool = False) -> np.ndarray:
        self.check_inputs(inputs, ops)
        fused = np.zeros((ops.num_nodes, self.cfg.hidden))
        for modality, x in zip(("text", "image"), inputs, strict=True):
            branch = self._run_branch(modality, x, ops, training)
            fused = fused + self.projections[modality].forward(branch, ops, training=training)
        return self.classifier.forward(fused, ops, training=training)

    def backward(self, grad_logits: np.ndarray) -> None:
        d_fused = self.classifier.backward(_wide(grad_logits))
        for modality in ("text", "image"):
            self._back_branch(modality, self.projections[modality].backward(d_fused))


class MgatLite(_TwoBranch):
    """Per-modality attention stacks fused by a learned scalar gate sigmoid(gamma)."""

    kind = "mgat"

    def _conv(self, modality: str, index: int, fan_in: int, fan_out: int) -> Layer:
        return AttentionConv(
            self._matrix(f"{modality}.layer{index}.w", fan_in, fan_out),
            self._vector(f"{modality}.layer{index}.a_left", fan_out),
            self._vector(f"{modality}.layer{index}.a_right", fan_out),
        )

    def _build_fusion(self, hidden: int) -> None:
        self.gamma = self._vector("gate.gamma", 1, zero=True)
        self._branches_out: dict[str, np.ndarray] = {}

    @property
    def gate(self) -> float:
        return float(sigmoid(_wide(self.gamma.value))[0])

    def forward(self, inputs: Sequence[np.ndarray], ops: GraphOperators, *, training: bool = False) -> np.ndarray:
        self.check_inputs(inputs, ops)
        self._branches_out = {
            modality: self._run_branch(modality, x, ops, training)
            for modality, x in zip(("text", "image"), inputs, strict=True)
        }
        g = self.gate
        fused = g * self._branches_out["text"] + (1.0 - g) * self._branches_out["image"]
        return self.classifier.forward(fused, ops, training=training)

    def backward(self, grad_logits: np.ndarray) -> None:
        d_fused = self.classifier.backward(_wide(grad_logits))
        g = self.gate
        h_text, h_image = self._branches_out["text"], self._branches_out["image"]
        self.gamma.accumulate(np.array([np.sum(d_fused * (h_text - h_image)) * g * (1.0 - g)]))
        self._back_branch("text", g * d_fused)
        self._back_branch("image", (1.0 - g) * d_fused)


MODEL_TYPES: dict[str, type[NodeClassifier]] = {
    "mlp": MlpModel,
    "gcn": GcnModel,
    "sage": SageModel,
    "mmgcn": MmgcnLite,
    "mgat": MgatLite,
}


def build_model(
    cfg: GnnConfig, feature_dims: Sequence[int], num_classes: int, *, dtype: type = np.float32
) -> NodeClassifier:
    cfg.validate()
    model_type = MODEL_TYPES[cfg.model]
    if len(feature_dims) != model_type.num_inputs:
        raise ModalityUnavailable(
            f"{cfg.label} expects {model_type.num_inputs} feature matrices, got {len(feature_dims)}"
        )
    return model_type(feature_dims, num_classes, cfg, dtype)


def _forward_multimodal(
    kind: str, x_text: np.ndarray | None, x_image: np.ndarray | None, adjacency: Any, model: NodeClassifier
) -> np.ndarray:
    if x_text is None or x_image is None:
        raise ModalityUnavailable(f"{kind} needs both text and image features")
    if np.asarray(x_text).shape[0] != np.asarray(x_image).shape[0]:
        raise ModalityUnavailable(
            f"modality node counts differ: {np.asarray(x_text).shape[0]} vs {np.asarray(x_image).shape[0]}"
        )
    if model.kind != kind:
        raise ModalityUnavailable(f"expected a {kind} model, got {model.kind}")
    ops = adjacency if isinstance(adjacency, GraphOperators) else GraphOperators.from_adjacency(adjacency)
    return model.forward((np.asarray(x_text), np.asarray(x_image)), ops, training=False)


def mmgcn_forward(
    x_text: np.ndarray | None, x_image: np.ndarray | None, adjacency: Any, params: NodeClassifier
) -> np.ndarray:
    return _forward_multimodal("mmgcn", x_text, x_image, adjacency, params)


def mgat_forward(
    x_text: np.ndarray | None, x_image: np.ndarray | None, adjacency: Any, params: NodeClassifier
) -> np.ndarray:
    return _forward_multimodal("mgat", x_text, x_image, adjacency, params)


# --- training / inference -------------------------------------------------


Features = np.ndarray | tuple[np.ndarray, np.ndarray]


@dataclass(slots=True)
class TrainingMetrics:
    loss_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0
    train_accuracy: float = 0.0
    val_accuracy: float = 0.0
    test_accuracy: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(slots=True)
class TrainedModel:
    model: NodeClassifier
    config: GnnConfig
    num_classes: int
    feature_dims: tuple[int, ...]
    metrics: TrainingMetrics = field(default_factory=TrainingMetrics)

    @property
    def label(self) -> str:
        return self.config.label


def _as_inputs(features: Features, model_kind: str) -> tuple[np.ndarray, ...]:
    if isinstance(features, tuple):
        inputs = tuple(np.asarray(x) for x in features)
        if model_kind not in MULTIMODAL_MODELS:
            return (np.hstack(inputs),)
        return inputs
    if model_kind in MULTIMODAL_MODELS:
        raise ModalityUnavailable(f"{model_kind} needs separate text and image feature matrices")
    return (np.asarray(features),)


def _split_accuracy(pred: np.ndarray, labels: np.ndarray, nodes: np.ndarray) -> float:
    if nodes.size == 0:
        return 0.0
    return float(np.mean(pred[nodes] == labels[nodes]))


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1).astype(np.int64)


def train_node_classifier(
    graph: MultimodalGraph,
    features: Features,
    split: SplitAssignment,
    cfg: GnnConfig | None = None,
    *,
    dtype: type = np.float32,
) -> TrainedModel:
    cfg = cfg or GnnConfig()
    cfg.validate()
    inputs = _as_inputs(features, cfg.model)
    for x in inputs:
        check_finite(x, "features")
    train, val, test = split.part("train"), split.part("val"), split.part("test")
    if train.size == 0:
        raise EmptyTrainSet("split has no training nodes")
    labels = graph.labels
    ops = GraphOperators.from_adjacency(graph.adjacency)
    model = build_model(cfg, [x.shape[1] for x in inputs], graph.num_classes, dtype=dtype)
    optim = OptimConfig(lr=cfg.lr)
    metrics = TrainingMetrics()

    def evaluate() -> np.ndarray:
        return argmax_labels(model.forward(inputs, ops, training=False))

    best_val = _split_accuracy(evaluate(), labels, val)
    best_values = [param.value.copy() for param in model.parameters()]
    for epoch in range(1, cfg.epochs + 1):
        logits = model.forward(inputs, ops, training=True)
        loss, grad_train = softmax_cross_entropy(logits[train], labels[train])
        grad = np.zeros_like(logits)
        grad[train] = grad_train
        model.backward(grad)
        adam_step(model.parameters(), optim)
        val_acc = _split_accuracy(evaluate(), labels, val)
        metrics.loss_curve.append(loss)
        metrics.val_curve.append(val_acc)
        if val_acc > best_val:
            best_val = val_acc
            metrics.best_epoch = epoch
            best_values = [param.value.copy() for param in model.parameters()]
        logger.debug("gnn epoch", extra={"model": cfg.label, "epoch": epoch, "loss": loss, "val_accuracy": val_acc})

    for param, value in zip(model.parameters(), best_values, strict=True):
        param.value = value
    pred = evaluate()
    metrics.train_accuracy = _split_accuracy(pred, labels, train)
    metrics.val_accuracy = _split_accuracy(pred, labels, val)
    metrics.test_accuracy = _split_accuracy(pred, labels, test)
    logger.info(
        "gnn trained",
        extra={
            "model": cfg.label,
            "best_epoch": metrics.best_epoch,
            "val_accuracy": metrics.val_accuracy,
            "test_accuracy": metrics.test_accuracy,
        },
    )
    return TrainedModel(
        model=model,
        config=cfg,
        num_classes=graph.num_classes,
        feature_dims=model.feature_dims,
        metrics=metrics,
    )


def predict(
    trained: TrainedModel,
    graph: MultimodalGraph,
    features: Features,
    nodes: Sequence[int] | np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Labels and per-class softmax scores for ``nodes`` (all nodes by default)."""
    inputs = _as_inputs(features, trained.config.model)
    dims = tuple(x.shape[1] if x.ndim == 2 else -1 for x in inputs)
    if dims != trained.feature_dims:
        raise ShapeMismatch(f"model trained on feature dims {trained.feature_dims}, got {dims}")
    index = np.arange(graph.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64).reshape(-1)
    outside = index[(index < 0) | (index >= graph.num_nodes)]
    if outside.size:
        raise ValidationError(f"nodes {outside.tolist()} out of range for graph with {graph.num_nodes} nodes")
    ops = GraphOperators.from_adjacency(graph.adjacency)
    logits = trained.model.forward(inputs, ops, training=False)
    scores = np.asarray(softmax(logits[index], axis=1))
    return argmax_labels(logits[index]), scores


def save_model(trained: TrainedModel, out_dir: Path) -> Path:
    params_dir = out_dir / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    shapes: dict[str, list[int]] = {}
    for name, param in trained.model.params.items():
        save_tensor(param.value, params_dir / f"{name}.emb")
        shapes[name] = list(param.shape)
    manifest = {
        "model": trained.label,
        "config": dataclass_to_dict(trained.config),
        "num_classes": trained.num_classes,
        "feature_dims": list(trained.feature_dims),
        "params": shapes,
        "metrics": trained.metrics.to_dict(),
    }
    path = out_dir / "model.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_model(out_dir: Path) -> TrainedModel:
    manifest = json.loads((out_dir / "model.json").read_text(encoding="utf-8"))
    cfg = GnnConfig(**manifest["config"])
    model = build_model(cfg, manifest["feature_dims"], int(manifest["num_classes"]))
    for name, shape in manifest["params"].items():
        model.params[name].value = load_tensor(out_dir / "params" / f"{name}.emb", shape)
    return TrainedModel(
        model=model,
        config=cfg,
        num_classes=int(manifest["num_classes"]),
        feature_dims=tuple(manifest["feature_dims"]),
        metrics=TrainingMetrics(**manifest["metrics"]),
    )
