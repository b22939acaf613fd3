"""Feed-forward networks with reverse-mode per-example gradients.

Weights live in one flat float64 vector (layer-major: W then b per layer);
per-example gradients come back as a [batch, n_params] matrix so DP-SGD can
clip each example independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..dp import NoiseStream
from ..errors import InvalidParameter, ShapeMismatch

ACTIVATIONS = ("relu", "identity", "softmax-out")
LOSSES = ("cross-entropy", "squared-error")


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidParameter(f"unknown activation {self.activation}")
        if self.width <= 0:
            raise InvalidParameter("layer width must be positive")

    def to_json(self) -> dict:
        return {"width": self.width, "activation": self.activation}

    @classmethod
    def from_json(cls, data: dict) -> "LayerSpec":
        return cls(data["width"], data["activation"])


def param_count(in_dim: int, layers: Sequence[LayerSpec]) -> int:
    total, prev = 0, in_dim
    for spec in layers:
        total += spec.width * prev + spec.width
        prev = spec.width
    return total


def init_weights(in_dim: int, layers: Sequence[LayerSpec], seed: int) -> np.ndarray:
    """Seeded initializer: W ~ N(0, 1/fan_in), b = 0. Same seed, same bytes."""
    stream = NoiseStream(seed)
    chunks = []
    prev = in_dim
    for spec in layers:
        w = stream.gaussian(1.0 / np.sqrt(prev), spec.width * prev)
        chunks.append(w)
        chunks.append(np.zeros(spec.width))
        prev = spec.width
    return np.concatenate(chunks) if chunks else np.zeros(0)


class Mlp:
    def __init__(self, in_dim: int, layers: Sequence[LayerSpec], weights: np.ndarray):
        self.in_dim = in_dim
        self.layers = list(layers)
        expected = param_count(in_dim, layers)
        if weights.shape != (expected,):
            raise ShapeMismatch(f"expected {expected} weights, got {weights.shape}")
        self.weights = np.asarray(weights, dtype=np.float64)

    @classmethod
    def initialized(cls, in_dim: int, layers: Sequence[LayerSpec], seed: int) -> "Mlp":
        return cls(in_dim, layers, init_weights(in_dim, layers, seed))

    def _views(self, weights: Optional[np.ndarray] = None):
        flat = self.weights if weights is None else weights
        views, offset, prev = [], 0, self.in_dim
        for spec in self.layers:
            w = flat[offset : offset + spec.width * prev].reshape(spec.width, prev)
            offset += spec.width * prev
            b = flat[offset : offset + spec.width]
            offset += spec.width
            views.append((w, b, spec.activation))
            prev = spec.width
        return views

    def forward(self, x: np.ndarray):
        """Returns (output, caches) where caches hold pre- and post-activations."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"input dim {x.shape[1]}, model expects {self.in_dim}")
        activations = [x]
        pre = []
        a = x
        for w, b, act in self._views():
            z = a @ w.T + b
            pre.append(z)
            a = _apply_activation(z, act)
            activations.append(a)
        return a, (activations, pre)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out

    def predict_labels(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict(x), axis=1)

    def loss_and_per_example_grads(self, x: np.ndarray, y: np.ndarray, loss: str):
        """Mean loss over the batch and per-example gradients [batch, n_params]."""
        if loss not in LOSSES:
            raise InvalidParameter(f"unknown loss {loss}")
        out, (activations, pre) = self.forward(x)
        batch = out.shape[0]
        final_act = self.layers[-1].activation

        if loss == "cross-entropy":
            if final_act != "softmax-out":
                raise InvalidParameter("cross-entropy requires a softmax-out final layer")
            y = np.asarray(y, dtype=np.int64).reshape(-1)
            if y.shape[0] != batch:
                raise ShapeMismatch("label count does not match batch")
            probs = out
            losses = -np.log(np.clip(probs[np.arange(batch), y], 1e-300, None))
            delta = probs.copy()
            delta[np.arange(batch), y] -= 1.0  # d loss_i / d z_L
        else:
            y = np.atleast_2d(np.asarray(y, dtype=np.float64))
            if y.shape != out.shape:
                raise ShapeMismatch(f"target shape {y.shape} vs output {out.shape}")
            diff = out - y
            losses = np.sum(diff * diff, axis=1)
            delta = 2.0 * diff
            if final_act != "softmax-out":
                delta = delta * _activation_grad(pre[-1], final_act)
            else:
                raise InvalidParameter("squared-error over softmax output is unsupported")

        views = self._views()
        grads = np.zeros((batch, self.weights.shape[0]))
        offset = self.weights.shape[0]
        for layer_idx in range(len(views) - 1, -1, -1):
            w, b, act = views[layer_idx]
            a_prev = activations[layer_idx]
            n_w, n_b = w.size, b.size
            offset -= n_b
            grads[:, offset : offset + n_b] = delta
            offset -= n_w
            grads[:, offset : offset + n_w] = np.einsum("bo,bi->boi", delta, a_prev).reshape(
                batch, n_w
            )
            if layer_idx > 0:
                delta = (delta @ w) * _activation_grad(pre[layer_idx - 1],
                                                       self.layers[layer_idx - 1].activation)
        return float(np.mean(losses)), grads

    def with_weights(self, weights: np.ndarray) -> "Mlp":
        return Mlp(self.in_dim, self.layers, weights)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict_labels(x) == np.asarray(y).reshape(-1)))


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "identity":
        return z
    if act == "softmax-out":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise InvalidParameter(f"unknown activation {act}")


def _activation_grad(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return (z > 0).astype(np.float64)
    if act == "identity":
        return np.ones_like(z)
    raise InvalidParameter(f"no elementwise gradient for {act}")


def forward_backward(model: Mlp, x: np.ndarray, y: np.ndarray, loss: str):
    """Module-level alias: (mean loss, per-example gradients)."""
    return model.loss_and_per_example_grads(x, y, loss)
