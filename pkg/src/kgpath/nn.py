"""Small dense-network toolkit with hand-written reverse-mode gradients.

Everything is float64 numpy. Layers compute ``x @ W + b`` on row-vector
batches, so ``W`` has shape ``(in_dim, out_dim)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MASK_PENALTY = 1e9
SNAPSHOT_FORMAT = "kgpath-params"
SNAPSHOT_VERSION = 1


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = {
    "linear": (lambda z: z, lambda z, y: np.ones_like(z)),
    "relu": (relu, lambda z, y: (z > 0).astype(np.float64)),
    "sigmoid": (sigmoid, lambda z, y: y * (1.0 - y)),
}


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"incompatible layer shapes {self.weights.shape} and {self.bias.shape}"
            )

    @classmethod
    def glorot(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-limit, limit, size=(in_dim, out_dim)), np.zeros(out_dim))

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int) -> "DenseLayer":
        return cls(np.zeros((in_dim, out_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        return x @ self.weights + self.bias


def affine_relu(layer: DenseLayer, x) -> np.ndarray:
    return relu(layer(x))


def masked_softmax(logits, mask) -> np.ndarray:
    """Softmax over entries where ``mask`` is 1; masked entries are exactly 0.

    Works on a single vector or row-wise on a 2-D batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask)
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} and mask {mask.shape} differ in shape")
    keep = mask > 0
    if not keep.any(axis=-1).all():
        raise ValueError("mask has no admissible entry (dead end)")
    if not np.isfinite(logits[keep]).all():
        raise FloatingPointError("non-finite logits on admissible actions")
    z = np.where(keep, logits, 0.0) + (keep - 1.0) * MASK_PENALTY
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_entropy(probs, mask) -> np.ndarray:
    """Shannon entropy restricted to masked-in entries."""
    keep = np.asarray(mask) > 0
    p = np.where(keep, probs, 1.0)
    return -np.sum(np.where(keep, probs * np.log(np.maximum(p, 1e-300)), 0.0), axis=-1)


@dataclass
class _Record:
    layer: DenseLayer
    name: str
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    activation: str


class GradientTape:
    """Records a chain of dense layers and backpropagates through it.

    >>> tape = GradientTape()
    >>> y = tape.dense(layer, x, "relu", name="l1")
    >>> grads, dx = tape.backward(np.ones_like(y))
    """

    def __init__(self):
        self._records: list[_Record] = []

    def dense(self, layer: DenseLayer, x, activation: str = "linear", name: str | None = None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = layer(x)
        y = ACTIVATIONS[activation][0](z)
        self._records.append(_Record(layer, name or f"layer{len(self._records)}", x, z, y, activation))
        return y

    def backward(self, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * output)`` w.r.t. every recorded layer.

        Returns ``({"<name>.weights": ..., "<name>.bias": ...}, d_input)``.
        """
        if not self._records:
            raise RuntimeError("backward called before any forward pass was recorded")
        grad = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        grads: dict[str, np.ndarray] = {}
        for rec in reversed(self._records):
            if grad.shape != rec.y.shape:
                raise ValueError(f"upstream shape {grad.shape} does not match output {rec.y.shape}")
            dz = grad * ACTIVATIONS[rec.activation][1](rec.z, rec.y)
            grads[f"{rec.name}.weights"] = rec.x.T @ dz
            grads[f"{rec.name}.bias"] = dz.sum(axis=0)
            grad = dz @ rec.layer.weights.T
        return grads, grad


def backward(tape: GradientTape, upstream):
    return tape.backward(upstream)[0]


@dataclass
class Optimizer:
    """Gradient step rule; ``kind`` is ``"adam"`` (moment-corrected) or ``"sgd"``."""

    lr: float = 1e-3
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def apply_update(
    opt: Optimizer,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    direction: str = "descend",
) -> dict[str, np.ndarray]:
    """Return updated copies of ``params``; keys absent from ``grads`` are untouched."""
    if direction not in ("ascend", "descend"):
        raise ValueError(f"direction must be 'ascend' or 'descend', not {direction!r}")
    sign = 1.0 if direction == "ascend" else -1.0
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    opt.step_count += 1
    out = dict(params)
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if opt.kind == "sgd":
            step = g
        else:
            m = opt._m.get(name, 0.0) * opt.beta1 + (1 - opt.beta1) * g
            v = opt._v.get(name, 0.0) * opt.beta2 + (1 - opt.beta2) * g * g
            opt._m[name], opt._v[name] = m, v
            m_hat = m / (1 - opt.beta1**opt.step_count)
            v_hat = v / (1 - opt.beta2**opt.step_count)
            step = m_hat / (np.sqrt(v_hat) + opt.eps)
        out[name] = params[name] + sign * opt.lr * step
    return out


def save_params(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write arrays as versioned JSON; float ``repr`` round-trips bit-exactly."""
    doc = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "meta": dict(meta or {}),
        "arrays": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in sorted(arrays.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"{path}: not a parameter snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {doc.get('version')}")
    arrays = {
        name: np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        for name, rec in doc["arrays"].items()
    }
    return arrays, doc["meta"]
