"""Dense numerics over numpy arrays: layer math with analytic gradients and Adam.

Storage is 32-bit; reductions and products accumulate in 64-bit. Inputs that are
already 64-bit stay 64-bit end to end so gradient checks can run at full precision.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmgbench.config import OptimConfig
from mmgbench.embedding_io import read_matrix, write_matrix
from mmgbench.errors import LabelOutOfRange, NonFiniteGradient, NonFiniteValue, ShapeMismatch

Tensor = np.ndarray


def result_dtype(*arrays: np.ndarray) -> np.dtype:
    if any(np.asarray(array).dtype == np.float64 for array in arrays):
        return np.dtype(np.float64)
    return np.dtype(np.float32)


def _wide(array: np.ndarray) -> np.ndarray:
    return np.asarray(array, dtype=np.float64)


def as_matrix(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    array = np.asarray(x)
    if array.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {array.shape}")
    return array


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue(f"{what} contains NaN or Inf")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return (_wide(a) @ _wide(b)).astype(result_dtype(a, b))


def linear_forward(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = _wide(matmul(x, w))
    if b is not None:
        b = np.asarray(b)
        if b.shape != (out.shape[1],):
            raise ShapeMismatch(f"bias shape {b.shape} does not match output width {out.shape[1]}")
        out = out + _wide(b)[None, :]
    return out.astype(result_dtype(x, w, *(() if b is None else (b,))))


def linear_backward(x: Tensor, w: Tensor, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of ``x @ w + b`` with respect to (x, w, b)."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    grad_out = as_matrix(grad_out, "grad_out")
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {(x.shape[0], w.shape[1])}")
    dtype = result_dtype(x, w, grad_out)
    g = _wide(grad_out)
    dx = (g @ _wide(w).T).astype(dtype)
    dw = (_wide(x).T @ g).astype(dtype)
    db = g.sum(axis=0).astype(dtype)
    return dx, dw, db


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0).astype(np.asarray(x).dtype)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return np.where(np.asarray(x) > 0.0, grad_out, 0.0).astype(result_dtype(x, grad_out))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = np.asarray(x)
    return np.where(x > 0.0, x, slope * x).astype(x.dtype)


def leaky_relu_backward(x: Tensor, grad_out: Tensor, slope: float = 0.2) -> Tensor:
    return np.where(np.asarray(x) > 0.0, grad_out, slope * np.asarray(grad_out)).astype(
        result_dtype(x, grad_out)
    )


def sigmoid(x: Tensor | float) -> Tensor:
    wide = _wide(x)
    decay = np.exp(-np.abs(wide))
    out = np.where(wide >= 0.0, 1.0 / (1.0 + decay), decay / (1.0 + decay))
    return out.astype(result_dtype(np.asarray(x)))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    wide = _wide(x)
    peak = np.max(wide, axis=axis, keepdims=True)
    total = np.log(np.sum(np.exp(wide - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(total, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    wide = _wide(x)
    shifted = np.exp(wide - np.max(wide, axis=axis, keepdims=True))
    return (shifted / np.sum(shifted, axis=axis, keepdims=True)).astype(result_dtype(np.asarray(x)))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> tuple[float, Tensor]:
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / n``."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    wide = _wide(logits)
    lse = logsumexp(wide, axis=1)
    rows = np.arange(n)
    loss = float(np.mean(lse - wide[rows, labels])) if n else 0.0
    grad = np.exp(wide - lse[:, None])
    grad[rows, labels] -= 1.0
    grad /= max(n, 1)
    return loss, grad.astype(result_dtype(logits))


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-normalize a vector or each row of a matrix; zero rows stay zero."""
    array = np.asarray(x)
    if array.ndim not in (1, 2):
        raise ShapeMismatch(f"l2_normalize expects a vector or matrix, got shape {array.shape}")
    wide = _wide(array)
    norms = np.linalg.norm(wide, axis=-1, keepdims=True)
    out = np.divide(wide, norms, out=np.zeros_like(wide), where=norms > 0.0)
    return out.astype(result_dtype(array))


def l2_normalize_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """``d/dx`` of ``x / |x|`` per row: ``(g - x_hat (x_hat . g)) / |x|``."""
    x = np.asarray(x)
    if np.shape(grad_out) != x.shape:
        raise ShapeMismatch(f"grad shape {np.shape(grad_out)} != {x.shape}")
    wide = _wide(x)
    g = _wide(grad_out)
    norms = np.linalg.norm(wide, axis=-1, keepdims=True)
    unit = np.divide(wide, norms, out=np.zeros_like(wide), where=norms > 0.0)
    projected = g - unit * np.sum(unit * g, axis=-1, keepdims=True)
    dx = np.divide(projected, norms, out=np.zeros_like(wide), where=norms > 0.0)
    return dx.astype(result_dtype(x, np.asarray(grad_out)))


def cosine_similarity(u: Tensor, v: Tensor) -> float:
    u = np.asarray(u)
    v = np.asarray(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatch(f"cosine_similarity needs equal-length vectors, got {u.shape} and {v.shape}")
    norm = float(np.linalg.norm(_wide(u)) * np.linalg.norm(_wide(v)))
    if norm == 0.0:
        return 0.0
    return float(_wide(u) @ _wide(v)) / norm


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"row widths differ: {a.shape[1]} vs {b.shape[1]}")
    return (_wide(l2_normalize(_wide(a))) @ _wide(l2_normalize(_wide(b))).T).astype(result_dtype(a, b))


@dataclass(slots=True)
class Parameter:
    value: Tensor
    grad: Tensor = field(init=False)
    m: Tensor = field(init=False)
    v: Tensor = field(init=False)
    t: int = 0

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=result_dtype(np.asarray(self.value)))
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    def accumulate(self, grad: Tensor) -> None:
        if np.shape(grad) != self.value.shape:
            raise ShapeMismatch(f"gradient shape {np.shape(grad)} != parameter shape {self.value.shape}")
        self.grad += np.asarray(grad, dtype=self.value.dtype)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def adam_step(params: Iterable[Parameter], cfg: OptimConfig) -> None:
    """Bias-corrected Adam; grads are zeroed and t incremented afterwards."""
    params = list(params)
    for index, param in enumerate(params):
        if not np.all(np.isfinite(param.grad)):
            raise NonFiniteGradient(f"parameter {index} with shape {param.shape} has a non-finite gradient")
    for param in params:
        param.t += 1
        g = _wide(param.grad)
        m = cfg.beta1 * _wide(param.m) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * _wide(param.v) + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**param.t)
        v_hat = v / (1.0 - cfg.beta2**param.t)
        update = cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        dtype = param.value.dtype
        param.value = (_wide(param.value) - update).astype(dtype)
        param.m = m.astype(dtype)
        param.v = v.astype(dtype)
        param.zero_grad()


def uniform_init(
    rng: np.random.Generator, fan_in: int, fan_out: int, *, dtype: type = np.float32
) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x`` (64-bit)."""
    point = np.array(x, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    grad_flat = grad.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + eps
        upper = float(f(point))
        flat[index] = original - eps
        lower = float(f(point))
        flat[index] = original
        grad_flat[index] = (upper - lower) / (2.0 * eps)
    return grad


def save_tensor(tensor: Tensor, path: Path) -> Path:
    array = np.asarray(tensor)
    check_finite(array, str(path))
    if array.ndim == 1:
        array = array[None, :]
    return write_matrix(array, path)


def load_tensor(path: Path, shape: Sequence[int] | None = None) -> Tensor:
    array = read_matrix(path)
    if shape is not None:
        if int(np.prod(shape)) != array.size:
            raise ShapeMismatch(f"{path}: cannot reshape {array.shape} to {tuple(shape)}")
        array = array.reshape(tuple(shape))
    return array
