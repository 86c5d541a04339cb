"""Minimal numerical core: dense models, losses, SGD/Adam, parameter containers.

Everything operates on float64 numpy arrays and is purely functional: no
operation mutates its inputs, so parameter sets can be shared freely between
concurrent workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "ParameterSet",
    "ModelSpec",
    "OptimizerState",
    "init_params",
    "forward",
    "loss_and_gradient",
    "optimizer_step",
    "parameter_count",
    "evaluate",
    "serialize_parameters",
    "deserialize_parameters",
]

PROB_FLOOR = 1e-12


class ShapeMismatchError(ValueError):
    """Raised when a tensor does not match the shape the model expects."""

    def __init__(self, name: str, expected, actual):
        self.tensor_name = name
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, got {tuple(actual)}")


@dataclass(frozen=True)
class ParameterSet:
    """Ordered, named collection of float64 tensors."""

    entries: tuple[tuple[str, np.ndarray], ...]
    version: int = 0

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(names) != len(set(names)):
            raise ValueError("duplicate tensor names in ParameterSet")
        object.__setattr__(
            self,
            "entries",
            tuple((n, np.asarray(t, dtype=np.float64)) for n, t in self.entries),
        )

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.entries]

    def __getitem__(self, name: str) -> np.ndarray:
        for n, t in self.entries:
            if n == name:
                return t
        raise KeyError(name)

    def shape_compatible(self, other: "ParameterSet") -> bool:
        if self.names() != other.names():
            return False
        return all(a.shape == b.shape for a, b in zip(self.tensors(), other.tensors()))

    def require_compatible(self, other: "ParameterSet", what: str = "parameters"):
        if self.names() != other.names():
            raise ShapeMismatchError(what, self.names(), other.names())
        for (n, a), (_, b) in zip(self.entries, other.entries):
            if a.shape != b.shape:
                raise ShapeMismatchError(n, a.shape, b.shape)

    def num_values(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def map(self, fn) -> "ParameterSet":
        return ParameterSet(tuple((n, fn(t)) for n, t in self.entries), self.version)

    def combine(self, other: "ParameterSet", fn) -> "ParameterSet":
        self.require_compatible(other)
        return ParameterSet(
            tuple((n, fn(a, b)) for (n, a), (_, b) in zip(self.entries, other.entries)),
            self.version,
        )

    def zeros_like(self) -> "ParameterSet":
        return self.map(np.zeros_like)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()]) if self.entries else np.empty(0)

    def with_flat(self, values: np.ndarray) -> "ParameterSet":
        out = []
        offset = 0
        for n, t in self.entries:
            out.append((n, values[offset : offset + t.size].reshape(t.shape).copy()))
            offset += t.size
        if offset != values.size:
            raise ShapeMismatchError("flat", (offset,), (values.size,))
        return ParameterSet(tuple(out), self.version)

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t * t)) for t in self.tensors())))

    def allfinite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def nbytes(self) -> int:
        return int(sum(t.nbytes for t in self.tensors()))


@dataclass(frozen=True)
class ModelSpec:
    """Feed-forward classifier description; `layer_sizes` runs input..output."""

    kind: str  # "logistic_regression" | "mlp"
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in ("logistic_regression", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError("layer_sizes must be >= 2 positive integers")
        if self.kind == "logistic_regression" and len(sizes) != 2:
            raise ValueError("logistic regression takes exactly [features, classes]")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class OptimizerState:
    kind: str  # "sgd" | "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    step: int = 0
    m: ParameterSet | None = None
    v: ParameterSet | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def parameter_count(model: ModelSpec) -> int:
    sizes = model.layer_sizes
    return sum(i * o + o for i, o in zip(sizes, sizes[1:]))


def init_params(model: ModelSpec, seed: int = 0) -> ParameterSet:
    """Glorot-uniform weights, zero biases; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    entries = []
    sizes = model.layer_sizes
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        entries.append((f"w{i}", rng.uniform(-limit, limit, size=(fan_in, fan_out))))
        entries.append((f"b{i}", np.zeros(fan_out)))
    return ParameterSet(tuple(entries))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model: ModelSpec, params: ParameterSet, batch_x: np.ndarray) -> np.ndarray:
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim != 2 or batch_x.shape[1] != model.feature_dim:
        raise ShapeMismatchError("batch_x", ("B", model.feature_dim), batch_x.shape)
    sizes = model.layer_sizes
    expected = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        expected.append((f"w{i}", (fan_in, fan_out)))
        expected.append((f"b{i}", (fan_out,)))
    if params.names() != [n for n, _ in expected]:
        raise ShapeMismatchError("params", [n for n, _ in expected], params.names())
    for (name, shape), tensor in zip(expected, params.tensors()):
        if tensor.shape != shape:
            raise ShapeMismatchError(name, shape, tensor.shape)
    return batch_x


def _forward_pass(model: ModelSpec, params: ParameterSet, batch_x: np.ndarray):
    """Returns (activations per layer, probabilities). Hidden layers use ReLU."""
    acts = [batch_x]
    h = batch_x
    n_layers = len(model.layer_sizes) - 1
    for i in range(n_layers):
        z = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    return acts, _softmax(acts[-1])


def forward(model: ModelSpec, params: ParameterSet, batch_x: np.ndarray) -> np.ndarray:
    batch_x = _check_batch(model, params, batch_x)
    _, probs = _forward_pass(model, params, batch_x)
    return probs


def _check_one_hot(batch_y: np.ndarray, batch: int, classes: int) -> np.ndarray:
    batch_y = np.asarray(batch_y, dtype=np.float64)
    if batch_y.shape != (batch, classes):
        raise ShapeMismatchError("batch_y", (batch, classes), batch_y.shape)
    if not (np.all((batch_y == 0.0) | (batch_y == 1.0)) and np.all(batch_y.sum(axis=1) == 1.0)):
        raise ValueError("batch_y must be one-hot")
    return batch_y


def loss_and_gradient(
    model: ModelSpec,
    params: ParameterSet,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
) -> tuple[float, ParameterSet]:
    """Mean categorical cross-entropy and its gradient via backprop."""
    batch_x = _check_batch(model, params, batch_x)
    n = batch_x.shape[0]
    batch_y = _check_one_hot(batch_y, n, model.classes)

    acts, probs = _forward_pass(model, params, batch_x)
    loss = float(-np.mean(np.sum(batch_y * np.log(np.clip(probs, PROB_FLOOR, None)), axis=1)))

    n_layers = len(model.layer_sizes) - 1
    grads: dict[str, np.ndarray] = {}
    delta = (probs - batch_y) / n  # softmax + CCE combined
    for i in range(n_layers - 1, -1, -1):
        grads[f"w{i}"] = acts[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params[f"w{i}"].T) * (acts[i] > 0)
    grad = ParameterSet(tuple((name, grads[name]) for name, _ in params.entries))
    return loss, grad


def optimizer_step(
    opt: OptimizerState, params: ParameterSet, grad: ParameterSet
) -> tuple[ParameterSet, OptimizerState]:
    params.require_compatible(grad, "grad")
    if not grad.allfinite():
        raise FloatingPointError("non-finite gradient")
    if opt.kind == "sgd":
        return params.combine(grad, lambda p, g: p - opt.learning_rate * g), opt

    m = opt.m if opt.m is not None else params.zeros_like()
    v = opt.v if opt.v is not None else params.zeros_like()
    t = opt.step + 1
    m = m.combine(grad, lambda a, g: opt.beta1 * a + (1 - opt.beta1) * g)
    v = v.combine(grad, lambda a, g: opt.beta2 * a + (1 - opt.beta2) * g * g)
    bias1 = 1 - opt.beta1**t
    bias2 = 1 - opt.beta2**t
    updated = []
    for (name, p), (_, mi), (_, vi) in zip(params.entries, m.entries, v.entries):
        m_hat = mi / bias1
        v_hat = vi / bias2
        updated.append((name, p - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.epsilon)))
    return ParameterSet(tuple(updated), params.version), replace(opt, step=t, m=m, v=v)


def evaluate(
    model: ModelSpec, params: ParameterSet, features: np.ndarray, labels: np.ndarray
) -> tuple[float, float]:
    """Mean cross-entropy loss and accuracy over a labelled set."""
    probs = forward(model, params, features)
    labels = np.asarray(labels)
    picked = np.clip(probs[np.arange(len(labels)), labels], PROB_FLOOR, None)
    loss = float(-np.mean(np.log(picked)))
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, accuracy


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# Binary container: little-endian, u32 entry count, then per entry
# u32 name length + UTF-8 name, u32 rank, u32 dims, raw f64 payload.

def serialize_parameters(params: ParameterSet) -> bytes:
    parts = [struct.pack("<I", len(params.entries))]
    for name, tensor in params.entries:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_parameters(blob: bytes, version: int = 0) -> ParameterSet:
    view = memoryview(blob)
    offset = 0

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(view, dtype="<f8", count=size, offset=offset).astype(np.float64)
        offset += size * 8
        entries.append((name, data.reshape(dims)))
    if offset != len(blob):
        raise ValueError(f"trailing bytes in parameter container ({len(blob) - offset})")
    return ParameterSet(tuple(entries), version)
