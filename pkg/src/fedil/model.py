"""Feed-forward classifier over a flat parameter vector.

All weights live in one float64 vector so aggregation and cosine geometry
operate on the same object the optimizer updates. Layer ``k`` occupies a
contiguous block: the ``(fan_in, fan_out)`` weight matrix in row-major
order followed by its ``fan_out`` bias.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError, TrainingError

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"FDIL"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError(f"layer widths must be positive: {self}")
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }


def unflatten(params: np.ndarray, arch: ModelArch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copies)."""
    params = np.asarray(params)
    if params.shape != (arch.num_params,):
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, arch expects ({arch.num_params},)"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_dims:
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def init_params(arch: ModelArch, seed: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in arch.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _activate(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _activation_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(z.dtype)


def _check_inputs(x: np.ndarray, arch: ModelArch) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ConfigurationError(
            f"input has shape {x.shape}, expected (n, {arch.input_dim})"
        )
    return x


def logits_batch(params: np.ndarray, arch: ModelArch, x: np.ndarray) -> np.ndarray:
    x = _check_inputs(x, arch)
    layers = unflatten(params, arch)
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = _activate(h, arch.activation)
    return h


def predict_proba(params: np.ndarray, arch: ModelArch, x: np.ndarray) -> np.ndarray:
    """Row-wise class probabilities for a ``(n, input_dim)`` batch."""
    return softmax(logits_batch(params, arch, x))


def forward(params: np.ndarray, arch: ModelArch, x: np.ndarray) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (arch.input_dim,):
        raise ConfigurationError(f"feature vector has shape {x.shape}, expected ({arch.input_dim},)")
    return predict_proba(params, arch, x[None, :])[0]


def cross_entropy(pred: np.ndarray, label: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= int(label) < pred.shape[-1]:
        raise InputError(f"label {label} outside [0, {pred.shape[-1]})")
    return float(-np.log(max(pred[int(label)], PROB_FLOOR)))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) = sum p log(p/q), with 0 log 0 = 0 and q floored."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    pm = p[mask]
    value = np.sum(pm * (np.log(np.maximum(pm, PROB_FLOOR)) - np.log(np.maximum(q[mask], PROB_FLOOR))))
    return float(max(value, 0.0))


@dataclass(frozen=True)
class LossTerm:
    """Weighted per-example loss over one input batch.

    ``kind="ce"``: ``target`` holds integer labels and the term is
    ``sum_j w_j * H(f(x_j), target_j)``.
    ``kind="kl"``: ``target`` holds reference distributions ``p_j`` and the
    term is ``sum_j w_j * KL(p_j || f(x_j))``; gradients do not flow into
    the reference.
    """

    x: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    kind: str = "ce"

    def __post_init__(self):
        if self.kind not in ("ce", "kl"):
            raise InputError(f"unknown loss kind {self.kind!r}")


def loss_and_grad(params: np.ndarray, arch: ModelArch, terms: Sequence[LossTerm]) -> tuple[float, np.ndarray]:
    """Scalar loss and its exact gradient with respect to ``params``.

    Terms are evaluated independently and summed; this keeps the
    floating-point result of a loss independent of which other terms are
    present.
    """
    if not terms or sum(len(t.x) for t in terms) == 0:
        raise InputError("empty batch")
    layers = unflatten(params, arch)
    n_layers = len(layers)
    total = 0.0
    grad = np.zeros(arch.num_params)
    grad_layers = unflatten(grad, arch)
    for term in terms:
        if len(term.x) == 0:
            continue
        x = _check_inputs(term.x, arch)
        w_ex = np.asarray(term.weights, dtype=np.float64)
        pre, post = [], [x]
        h = x
        for k, (w, b) in enumerate(layers):
            z = h @ w + b
            pre.append(z)
            h = _activate(z, arch.activation) if k < n_layers - 1 else z
            post.append(h)
        logp = log_softmax(pre[-1])
        q = np.exp(logp)
        if term.kind == "ce":
            labels = np.asarray(term.target, dtype=np.int64)
            if labels.min() < 0 or labels.max() >= arch.num_classes:
                raise InputError("label out of range in loss term")
            rows = np.arange(len(labels))
            total += float(np.sum(w_ex * -logp[rows, labels]))
            delta = q.copy()
            delta[rows, labels] -= 1.0
        else:
            ref = np.asarray(term.target, dtype=np.float64)
            safe = np.where(ref > 0, ref, 1.0)
            total += float(np.sum(w_ex * np.sum(np.where(ref > 0, ref * (np.log(safe) - logp), 0.0), axis=1)))
            delta = q * ref.sum(axis=1, keepdims=True) - ref
        delta *= w_ex[:, None]
        for k in range(n_layers - 1, -1, -1):
            gw, gb = grad_layers[k]
            gw += post[k].T @ delta
            gb += delta.sum(axis=0)
            if k > 0:
                delta = (delta @ layers[k][0].T) * _activation_grad(pre[k - 1], post[k], arch.activation)
    return total, grad


def backward(params: np.ndarray, arch: ModelArch, terms: Sequence[LossTerm]) -> np.ndarray:
    return loss_and_grad(params, arch, terms)[1]


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if params.shape != grad.shape:
        raise ConfigurationError(f"grad shape {grad.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    return params - lr * grad


def accuracy(params: np.ndarray, arch: ModelArch, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ConfigurationError("cannot score an empty set")
    pred = np.argmax(logits_batch(params, arch, x), axis=1)
    return float(np.mean(pred == np.asarray(y)))


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: np.ndarray) -> Path:
    path = Path(path)
    values = np.ascontiguousarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, values.size))
        fh.write(values.tobytes())
    return path


def load_checkpoint(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"checkpoint header truncated: {len(raw)} of {_HEADER.size} bytes", offset=0)
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    expected = _HEADER.size + 8 * count
    if len(raw) != expected:
        raise FormatError(f"checkpoint expected {expected} bytes, found {len(raw)}", offset=_HEADER.size)
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)


def export_checkpoint_json(path, params: np.ndarray, arch: ModelArch, **extra) -> Path:
    path = Path(path)
    doc = {"format": "FDIL", "version": CHECKPOINT_VERSION, "arch": arch.to_dict(),
           "num_params": int(params.size), **extra, "params": [float(v) for v in params]}
    path.write_text(json.dumps(doc, indent=1))
    return path
