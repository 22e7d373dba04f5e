"""Minimal dense MLP with exact gradients, replay losses, and plain SGD.

Everything operates on flat parameter vectors so that moving-average
snapshots, perturbation analysis, and checkpointing all share one
representation. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LayoutMismatchError(ValueError):
    """Two parameter vectors (or a vector and an architecture) disagree on layout."""


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 784
    hidden_dims: tuple[int, ...] = (100, 100)
    output_dim: int = 10

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        out = []
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            out.append((f"w{i}", (fan_in, fan_out)))
            out.append((f"b{i}", (fan_out,)))
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())


class ParamVector:
    """Flat float64 view of all trainable weights and biases.

    The layout (ordered list of (name, shape) records) fixes how the flat
    array maps back onto layers. Vectors are only combinable when their
    layouts match exactly.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        layout = tuple((name, tuple(shape)) for name, shape in layout)
        values = np.asarray(values, dtype=np.float64)
        expected = sum(int(np.prod(s)) for _, s in layout)
        if values.ndim != 1 or values.size != expected:
            raise LayoutMismatchError(
                f"expected flat vector of length {expected}, got shape {values.shape}"
            )
        self.values = values
        self.layout = layout

    def require_same_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("parameter layouts differ")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def views(self) -> dict[str, np.ndarray]:
        """Named reshaped views sharing memory with the flat array."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out

    def __len__(self) -> int:
        return self.values.size


def zeros_like(params: ParamVector) -> ParamVector:
    return ParamVector(np.zeros(len(params)), params.layout)


def init_params(seed, architecture: Architecture) -> ParamVector:
    """Fan-in-scaled uniform weights (bound 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    values = np.empty(architecture.n_params)
    offset = 0
    for name, shape in architecture.layout():
        size = int(np.prod(shape))
        if name.startswith("w"):
            bound = 1.0 / np.sqrt(shape[0])
            values[offset : offset + size] = rng.uniform(-bound, bound, size)
        else:
            values[offset : offset + size] = 0.0
        offset += size
    return ParamVector(values, architecture.layout())


@dataclass
class Batch:
    """A batch of flattened inputs in [0,1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be [n, d], labels [n]")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on batch size")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @staticmethod
    def concat(a: "Batch", b: "Batch") -> "Batch":
        return Batch(
            np.concatenate([a.inputs, b.inputs], axis=0),
            np.concatenate([a.labels, b.labels], axis=0),
        )


@dataclass(frozen=True)
class LossReport:
    total: float
    ce_term: float
    mse_term: float
    lam: float


class Network:
    """Fixed-topology ReLU MLP: identity output layer, logits out.

    Immutable after construction; `with_params` returns a new view for a
    stepped parameter vector.
    """

    def __init__(self, architecture: Architecture, params: ParamVector):
        if params.layout != architecture.layout():
            raise LayoutMismatchError("params do not match architecture")
        self.architecture = architecture
        self.params = params

    def with_params(self, params: ParamVector) -> "Network":
        return Network(self.architecture, params)

    def _layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        v = self.params.views()
        n = len(self.architecture.layer_dims())
        return [(v[f"w{i}"], v[f"b{i}"]) for i in range(n)]

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        logits, _ = self._forward_cached(inputs)
        return logits

    def _forward_cached(self, inputs: np.ndarray):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.architecture.input_dim:
            raise ValueError(
                f"inputs must be [n, {self.architecture.input_dim}], got {inputs.shape}"
            )
        layers = self._layers()
        activations = [inputs]
        h = inputs
        for w, b in layers[:-1]:
            h = np.maximum(h @ w + b, 0.0)
            activations.append(h)
        w, b = layers[-1]
        logits = h @ w + b
        return logits, activations


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max-subtraction. Accepts 1-D or 2-D."""
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its exact gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("labels out of range")
    probs = softmax(logits)
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.clip(probs[rows, labels], 1e-300, None))))
    grad = probs
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def mse_loss(pred_logits: np.ndarray, target_logits: np.ndarray):
    """Mean over all elements of the squared difference, with exact gradient."""
    pred = np.asarray(pred_logits, dtype=np.float64)
    target = np.asarray(target_logits, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def backward(
    net: Network,
    batch: Batch,
    consistency_targets: np.ndarray | None = None,
    memory_mask: np.ndarray | None = None,
    lam: float = 0.0,
):
    """Exact gradient of the combined replay loss.

    Cross-entropy applies to every row of the batch; the consistency (MSE)
    term applies only to the rows flagged by `memory_mask`, regressing the
    working model's raw logits onto `consistency_targets`.
    Returns (LossReport, grad ParamVector).
    """
    logits, activations = net._forward_cached(batch.inputs)
    ce, d_logits = cross_entropy_loss(logits, batch.labels)

    mse = 0.0
    if consistency_targets is not None:
        if memory_mask is None:
            raise ValueError("consistency_targets given without memory_mask")
        memory_mask = np.asarray(memory_mask, dtype=bool)
        if memory_mask.shape != (len(batch),):
            raise ValueError("memory_mask must have one entry per batch row")
        targets = np.asarray(consistency_targets, dtype=np.float64)
        if targets.shape != (int(memory_mask.sum()), logits.shape[1]):
            raise ValueError("consistency_targets do not match masked rows")
        mse, d_mse = mse_loss(logits[memory_mask], targets)
        d_logits[memory_mask] += lam * d_mse
    elif memory_mask is not None and np.any(memory_mask):
        raise ValueError("memory_mask given without consistency_targets")

    layers = net._layers()
    grad = zeros_like(net.params)
    gv = grad.views()
    delta = d_logits
    for i in range(len(layers) - 1, -1, -1):
        a = activations[i]
        gv[f"w{i}"][...] = a.T @ delta
        gv[f"b{i}"][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (a > 0.0)

    report = LossReport(total=ce + lam * mse, ce_term=ce, mse_term=mse, lam=lam)
    return report, grad


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    params.require_same_layout(grad)
    return ParamVector(params.values - lr * grad.values, params.layout)
