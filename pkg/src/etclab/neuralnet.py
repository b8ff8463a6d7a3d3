"""Minimal dense network engine.

Forward evaluation, reverse-mode gradients, an adaptive-moment optimizer and
exact text serialization for small MLPs. Supports TanH and ReLU hidden
activations and linear / softmax / gaussian output heads. Gaussian heads carry
a state-independent learned log-std vector and return (mean, log_std)
concatenated.

Everything operates on float64 and accepts single inputs (1-D) or batches
(2-D, one row per sample).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_HEADS = ("linear", "softmax", "gaussian")


class NetworkError(ValueError):
    pass


class NonFiniteGradientError(RuntimeError):
    """An optimizer step was rejected because the tape contains NaN/Inf."""


@dataclass
class MlpNetwork:
    """Dense feedforward network: list of (W, b) layers plus head tags."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_head: str = "linear"
    log_std: np.ndarray | None = None

    def __post_init__(self):
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise NetworkError(f"unknown head {self.output_head!r}")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[0] != self.weights[i + 1].shape[1]:
                raise NetworkError("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise NetworkError("bias dimension mismatch")
        if self.output_head == "gaussian" and self.log_std is None:
            self.log_std = np.zeros(self.weights[-1].shape[0])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        out = self.weights[-1].shape[0]
        return 2 * out if self.output_head == "gaussian" else out

    @property
    def head_dim(self) -> int:
        """Dimension of the final affine layer (mean dim for gaussian heads)."""
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            hidden_activation=self.hidden_activation,
            output_head=self.output_head,
            log_std=None if self.log_std is None else self.log_std.copy(),
        )


def init_network(sizes, hidden_activation, output_head, rng: np.random.Generator,
                 scale: float = 1.0) -> MlpNetwork:
    """Fresh network with fan-in-scaled uniform weights and zero biases.

    `sizes` lists (input_dim, hidden..., output_dim); for gaussian heads the
    last entry is the mean dimension.
    """
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = scale / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpNetwork(weights, biases, hidden_activation, output_head)


def _hidden(net, z):
    if net.hidden_activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _forward_cached(net: MlpNetwork, x: np.ndarray):
    """Forward pass keeping post-activation values for backprop."""
    acts = [x]
    h = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if i < n_layers - 1:
            h = _hidden(net, z)
        else:
            h = z
        acts.append(h)
    pre_out = acts[-1]
    if net.output_head == "softmax":
        shifted = pre_out - pre_out.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)
    elif net.output_head == "gaussian":
        out = np.concatenate(
            [pre_out, np.broadcast_to(net.log_std, pre_out.shape)], axis=-1)
    else:
        out = pre_out
    return out, acts


def forward(net: MlpNetwork, x) -> np.ndarray:
    """Evaluate the network; gaussian heads return (mean, log_std) concatenated."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.input_dim:
        raise NetworkError(
            f"input dim {x.shape[1]} does not match network input {net.input_dim}")
    out, _ = _forward_cached(net, x)
    return out[0] if single else out


@dataclass
class GradientTape:
    """Parameter gradients aligned with an MlpNetwork layout."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_log_std: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, net: MlpNetwork) -> "GradientTape":
        return cls(
            d_weights=[np.zeros_like(w) for w in net.weights],
            d_biases=[np.zeros_like(b) for b in net.biases],
            d_log_std=None if net.log_std is None else np.zeros_like(net.log_std),
        )

    def add(self, other: "GradientTape") -> "GradientTape":
        for a, b in zip(self.d_weights, other.d_weights):
            a += b
        for a, b in zip(self.d_biases, other.d_biases):
            a += b
        if self.d_log_std is not None and other.d_log_std is not None:
            self.d_log_std += other.d_log_std
        return self

    def scale(self, factor: float) -> "GradientTape":
        for a in self.d_weights:
            a *= factor
        for a in self.d_biases:
            a *= factor
        if self.d_log_std is not None:
            self.d_log_std *= factor
        return self

    def is_finite(self) -> bool:
        arrays = self.d_weights + self.d_biases
        if self.d_log_std is not None:
            arrays = arrays + [self.d_log_std]
        return all(np.all(np.isfinite(a)) for a in arrays)


def backward(net: MlpNetwork, x, upstream) -> GradientTape:
    """Gradients of sum(upstream * output) w.r.t. every parameter.

    `upstream` has the head's output dimension: probabilities for softmax
    heads, (mean, log_std) blocks for gaussian heads. Batched inputs
    accumulate (sum) over the batch.
    """
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
        upstream = upstream[None, :]
    _, acts = _forward_cached(net, x)
    tape = GradientTape.zeros_like(net)

    if net.output_head == "softmax":
        # acts[-1] are logits here; recompute probabilities for the Jacobian
        z = acts[-1]
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
        g = p * (upstream - (upstream * p).sum(axis=-1, keepdims=True))
    elif net.output_head == "gaussian":
        k = net.head_dim
        g = upstream[:, :k]
        tape.d_log_std = upstream[:, k:].sum(axis=0)
    else:
        g = upstream

    n_layers = len(net.weights)
    for i in range(n_layers - 1, -1, -1):
        h_in = acts[i]
        tape.d_weights[i][...] = g.T @ h_in
        tape.d_biases[i][...] = g.sum(axis=0)
        if i > 0:
            g = g @ net.weights[i]
            h = acts[i]
            if net.hidden_activation == "tanh":
                g = g * (1.0 - h * h)
            else:
                g = g * (h > 0.0)
    return tape


def get_flat_params(net: MlpNetwork) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    if net.log_std is not None:
        parts.append(net.log_std.ravel())
    return np.concatenate(parts)


def set_flat_params(net: MlpNetwork, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=float)
    idx = 0
    for w, b in zip(net.weights, net.biases):
        w[...] = flat[idx:idx + w.size].reshape(w.shape)
        idx += w.size
        b[...] = flat[idx:idx + b.size]
        idx += b.size
    if net.log_std is not None:
        net.log_std[...] = flat[idx:idx + net.log_std.size]
        idx += net.log_std.size
    if idx != flat.size:
        raise NetworkError("flat parameter vector has wrong length")


def tape_flat(tape: GradientTape) -> np.ndarray:
    parts = []
    for dw, db in zip(tape.d_weights, tape.d_biases):
        parts.append(dw.ravel())
        parts.append(db.ravel())
    if tape.d_log_std is not None:
        parts.append(tape.d_log_std.ravel())
    return np.concatenate(parts)


@dataclass
class Adam:
    """Adaptive-moment optimizer with bias-corrected first/second moments."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: GradientTape | None = field(default=None, repr=False)
    _v: GradientTape | None = field(default=None, repr=False)
    _t: int = field(default=0, repr=False)

    def step(self, net: MlpNetwork, tape: GradientTape, maximize: bool = False) -> None:
        """Apply one update. Ascends the objective when maximize=True.

        Raises NonFiniteGradientError (leaving parameters untouched) when the
        tape contains non-finite entries.
        """
        if not tape.is_finite():
            raise NonFiniteGradientError("rejecting step: non-finite gradient")
        if self._m is None:
            self._m = GradientTape.zeros_like(net)
            self._v = GradientTape.zeros_like(net)
        self._t += 1
        t = self._t
        sign = 1.0 if maximize else -1.0

        def update(param, grad, m, v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * grad
            v[...] = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            param += sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

        for i in range(len(net.weights)):
            update(net.weights[i], tape.d_weights[i],
                   self._m.d_weights[i], self._v.d_weights[i])
            update(net.biases[i], tape.d_biases[i],
                   self._m.d_biases[i], self._v.d_biases[i])
        if net.log_std is not None and tape.d_log_std is not None:
            update(net.log_std, tape.d_log_std,
                   self._m.d_log_std, self._v.d_log_std)


def save(net: MlpNetwork) -> str:
    """Serialize to versioned JSON text; float repr round-trips doubles exactly."""
    doc = {
        "format_version": FORMAT_VERSION,
        "activation": net.hidden_activation,
        "head": net.output_head,
        "layers": [
            {
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "weights": [float(v) for v in w.ravel()],
                "bias": [float(v) for v in b],
            }
            for w, b in zip(net.weights, net.biases)
        ],
    }
    if net.log_std is not None:
        doc["log_std"] = [float(v) for v in net.log_std]
    return json.dumps(doc)


def load(text: str) -> MlpNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"malformed model file: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise NetworkError(
            f"unsupported format version {doc.get('format_version')!r}")
    weights, biases = [], []
    for layer in doc["layers"]:
        rows, cols = layer["rows"], layer["cols"]
        w = np.array(layer["weights"], dtype=float)
        if w.size != rows * cols:
            raise NetworkError("declared shape does not match weight count")
        b = np.array(layer["bias"], dtype=float)
        if b.size != rows:
            raise NetworkError("declared shape does not match bias count")
        weights.append(w.reshape(rows, cols))
        biases.append(b)
    log_std = None
    if "log_std" in doc:
        log_std = np.array(doc["log_std"], dtype=float)
    return MlpNetwork(weights, biases, doc["activation"], doc["head"], log_std)
