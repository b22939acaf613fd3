"""Differentiable architecture search over a weight-sharing supernet.

Each block mixes candidate bottleneck ops (hidden widths, 0 = skip) weighted
by softmax(theta); theta and op weights train jointly on task loss plus a
cost regularizer over expected multiply-adds. The derived architecture is
the per-block argmax (ties toward smaller cost). Every op's weights are
initialized from an op-specific seed, so re-initializing the derived network
after search reproduces the pre-search weights byte for byte, and the final
DP-SGD training starts from a state untouched by the (non-released) search.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..dp import DpSgdConfig, NoiseStream, accounting_receipt, dp_sgd_step, epsilon_for_config
from ..errors import EmptyData, InvalidParameter
from .nn import LayerSpec, Mlp, init_weights
from .registry import ModelArtifact, Provenance, Signature

ALLOWED_WIDTHS = (0, 8, 16, 32, 64)


@dataclass(frozen=True)
class BlockSpec:
    d_in: int
    d_out: int
    candidates: tuple[int, ...]

    def __post_init__(self):
        if not self.candidates:
            raise InvalidParameter("block needs at least one candidate")
        for w in self.candidates:
            if w not in ALLOWED_WIDTHS:
                raise InvalidParameter(f"width {w} not in {ALLOWED_WIDTHS}")
            if w == 0 and self.d_in != self.d_out:
                raise InvalidParameter("skip candidate requires d_in == d_out")

    def cost(self, width: int) -> float:
        """Multiply-adds of the bottleneck at this width."""
        return 0.0 if width == 0 else float(width * (self.d_in + self.d_out))


@dataclass
class SearchSpace:
    in_dim: int
    n_classes: int
    blocks: list[BlockSpec]
    temperature: float = 1.0
    cost_weight: float = 0.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidParameter("temperature must be positive")
        if self.cost_weight < 0:
            raise InvalidParameter("cost weight must be nonnegative")
        prev = self.in_dim
        for block in self.blocks:
            if block.d_in != prev:
                raise InvalidParameter("block input dim does not chain")
            prev = block.d_out
        self.head_in = prev

    def architecture_layers(self, widths: Sequence[int]) -> list[LayerSpec]:
        layers: list[LayerSpec] = []
        for block, w in zip(self.blocks, widths):
            if w > 0:
                layers.append(LayerSpec(w, "relu"))
                layers.append(LayerSpec(block.d_out, "identity"))
        layers.append(LayerSpec(self.n_classes, "softmax-out"))
        return layers

    def macc_count(self, widths: Sequence[int]) -> float:
        return sum(b.cost(w) for b, w in zip(self.blocks, widths))

    def all_architectures(self) -> list[tuple[int, ...]]:
        archs: list[tuple[int, ...]] = [()]
        for block in self.blocks:
            archs = [a + (w,) for a in archs for w in block.candidates]
        return archs


def _op_seed(seed: int, tag: str) -> int:
    return (int(seed) * 1000003 + zlib.crc32(tag.encode())) % 2**63


def op_init_weights(space: SearchSpace, block_idx: int, width: int, seed: int) -> np.ndarray:
    block = space.blocks[block_idx]
    if width == 0:
        return np.zeros(0)
    specs = [LayerSpec(width, "relu"), LayerSpec(block.d_out, "identity")]
    return init_weights(block.d_in, specs, _op_seed(seed, f"block{block_idx}.w{width}"))


def head_init_weights(space: SearchSpace, seed: int) -> np.ndarray:
    return init_weights(space.head_in, [LayerSpec(space.n_classes, "softmax-out")],
                        _op_seed(seed, "head"))


def initial_weights_for(space: SearchSpace, widths: Sequence[int], seed: int) -> np.ndarray:
    """Weights of the derived architecture at the shared seeded initialization."""
    chunks = [
        op_init_weights(space, i, w, seed) for i, w in enumerate(widths) if w > 0
    ]
    chunks.append(head_init_weights(space, seed))
    return np.concatenate(chunks)


class SuperNet:
    """All candidate ops in one flat parameter vector plus per-block theta."""

    def __init__(self, space: SearchSpace, seed: int):
        self.space = space
        self.seed = seed
        self.segments: dict = {}
        chunks = []
        offset = 0
        for b, block in enumerate(space.blocks):
            for j, w in enumerate(block.candidates):
                arr = op_init_weights(space, b, w, seed)
                self.segments[("op", b, j)] = (offset, arr.size)
                chunks.append(arr)
                offset += arr.size
        head = head_init_weights(space, seed)
        self.segments["head"] = (offset, head.size)
        chunks.append(head)
        offset += head.size
        for b, block in enumerate(space.blocks):
            n = len(block.candidates)
            self.segments[("theta", b)] = (offset, n)
            chunks.append(np.zeros(n))
            offset += n
        self.params = np.concatenate(chunks)

    def _seg(self, key, params: Optional[np.ndarray] = None) -> np.ndarray:
        flat = self.params if params is None else params
        offset, size = self.segments[key]
        return flat[offset : offset + size]

    def theta(self, b: int) -> np.ndarray:
        return self._seg(("theta", b))

    def mixture_weights(self, b: int) -> np.ndarray:
        t = self.theta(b) / self.space.temperature
        e = np.exp(t - t.max())
        return e / e.sum()

    def _op_views(self, b: int, j: int):
        block = self.space.blocks[b]
        w = block.candidates[j]
        seg = self._seg(("op", b, j))
        off = 0
        w1 = seg[off : off + w * block.d_in].reshape(w, block.d_in); off += w * block.d_in
        b1 = seg[off : off + w]; off += w
        w2 = seg[off : off + block.d_out * w].reshape(block.d_out, w); off += block.d_out * w
        b2 = seg[off : off + block.d_out]
        return w1, b1, w2, b2

    def forward(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        caches = []
        a = x
        for b, block in enumerate(self.space.blocks):
            p = self.mixture_weights(b)
            op_caches = []
            y = np.zeros((a.shape[0], block.d_out))
            for j, width in enumerate(block.candidates):
                if width == 0:
                    out = a
                    op_caches.append(("skip", None, None, out))
                else:
                    w1, b1, w2, b2 = self._op_views(b, j)
                    z1 = a @ w1.T + b1
                    h = np.maximum(z1, 0.0)
                    out = h @ w2.T + b2
                    op_caches.append(("op", z1, h, out))
                y = y + p[j] * out
            caches.append((a, p, op_caches))
            a = y
        off, size = self.segments["head"]
        head_in = self.space.head_in
        wh = self.params[off : off + self.space.n_classes * head_in].reshape(
            self.space.n_classes, head_in
        )
        bh = self.params[off + self.space.n_classes * head_in : off + size]
        logits = a @ wh.T + bh
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        return probs, (caches, a, wh, bh)

    def expected_cost(self) -> float:
        return sum(
            float(np.dot(self.mixture_weights(b), [block.cost(w) for w in block.candidates]))
            for b, block in enumerate(self.space.blocks)
        )

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, cost_weight: float):
        """Cross-entropy plus cost regularizer; returns (loss, flat gradient)."""
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        probs, (caches, a_last, wh, bh) = self.forward(x)
        batch = probs.shape[0]
        ce = float(np.mean(-np.log(np.clip(probs[np.arange(batch), y], 1e-300, None))))
        loss = ce + cost_weight * self.expected_cost()

        grad = np.zeros_like(self.params)
        dlogits = probs.copy()
        dlogits[np.arange(batch), y] -= 1.0
        dlogits /= batch
        off, size = self.segments["head"]
        nh = self.space.n_classes * self.space.head_in
        grad[off : off + nh] = (dlogits.T @ a_last).ravel()
        grad[off + nh : off + size] = dlogits.sum(axis=0)
        da = dlogits @ wh

        for b in range(len(self.space.blocks) - 1, -1, -1):
            block = self.space.blocks[b]
            a_in, p, op_caches = caches[b]
            dy = da
            dp_raw = np.zeros(len(block.candidates))
            da = np.zeros_like(a_in)
            for j, width in enumerate(block.candidates):
                kind, z1, h, out = op_caches[j]
                dp_raw[j] = float(np.sum(dy * out))
                dout = p[j] * dy
                if kind == "skip":
                    da += dout
                    continue
                w1, b1, w2, b2 = self._op_views(b, j)
                goff, gsize = self.segments[("op", b, j)]
                gseg = grad[goff : goff + gsize]
                dh = dout @ w2
                dz1 = dh * (z1 > 0)
                o = 0
                gseg[o : o + w1.size] += (dz1.T @ a_in).ravel(); o += w1.size
                gseg[o : o + b1.size] += dz1.sum(axis=0); o += b1.size
                gseg[o : o + w2.size] += (dout.T @ h).ravel(); o += w2.size
                gseg[o : o + b2.size] += dout.sum(axis=0)
                da += dz1 @ w1
            # softmax jacobian for both the mixture and the cost regularizer
            costs = np.array([block.cost(w) for w in block.candidates])
            dp_total = dp_raw + cost_weight * costs
            inner = dp_total - float(np.dot(p, dp_total))
            toff, tsize = self.segments[("theta", b)]
            grad[toff : toff + tsize] = p * inner / self.space.temperature
        return loss, grad

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        probs, _ = self.forward(x)
        return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y).reshape(-1)))


class Adam:
    def __init__(self, size: int, lr: float = 0.05, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class DnasResult:
    widths: tuple[int, ...]
    theta: list[np.ndarray]
    macc: float
    val_accuracy: float


def derive_architecture(space: SearchSpace, thetas: Sequence[np.ndarray]) -> tuple[int, ...]:
    widths = []
    for b, block in enumerate(space.blocks):
        t = np.asarray(thetas[b])
        best = t.max()
        tied = [j for j in range(len(block.candidates)) if t[j] >= best - 1e-12]
        j = min(tied, key=lambda j: (block.cost(block.candidates[j]), block.candidates[j]))
        widths.append(block.candidates[j])
    return tuple(widths)


def dnas_search(
    space: SearchSpace,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    cost_weight: float,
    seed: int,
    steps: int = 300,
    lr: float = 0.05,
) -> DnasResult:
    x_train, y_train = train
    x_val, y_val = val
    if len(x_train) == 0 or len(x_val) == 0:
        raise EmptyData("search needs nonempty train and validation data")
    net = SuperNet(space, seed)
    if all(len(b.candidates) == 1 for b in space.blocks):
        widths = tuple(b.candidates[0] for b in space.blocks)
        return DnasResult(widths, [net.theta(b).copy() for b in range(len(space.blocks))],
                          space.macc_count(widths), 0.0)
    adam = Adam(net.params.size, lr=lr)
    for _ in range(steps):
        _, grad = net.loss_and_grads(x_train, y_train, cost_weight)
        net.params = adam.step(net.params, grad)
    thetas = [net.theta(b).copy() for b in range(len(space.blocks))]
    widths = derive_architecture(space, thetas)
    return DnasResult(widths, thetas, space.macc_count(widths), net.accuracy(x_val, y_val))


def train_with_dpsgd(
    model: Mlp,
    x: np.ndarray,
    y: np.ndarray,
    config: DpSgdConfig,
    loss: str = "cross-entropy",
) -> tuple[Mlp, int, float]:
    """DP-SGD minibatch training loop; returns (model, accounted steps, epsilon)."""
    if len(x) == 0:
        raise EmptyData("training data is empty")
    noise = NoiseStream(config.seed).spawn("dpsgd-noise")
    sampler = NoiseStream(config.seed).spawn("dpsgd-batch")
    weights = model.weights.copy()
    accounted = 0
    n = x.shape[0]
    for _ in range(config.steps):
        if config.sampling_rate >= 1.0:
            idx = np.arange(n)
        else:
            idx = np.nonzero(sampler.uniform(n) < config.sampling_rate)[0]
        if idx.size == 0:
            continue
        current = model.with_weights(weights)
        _, grads = current.loss_and_per_example_grads(x[idx], y[idx], loss)
        weights, increment = dp_sgd_step(weights, grads, config, noise)
        accounted += 1
    epsilon = epsilon_for_config(config, steps=accounted)
    return model.with_weights(weights), accounted, epsilon


def finalize_with_dpsgd(
    space: SearchSpace,
    widths: Sequence[int],
    config: DpSgdConfig,
    data: tuple[np.ndarray, np.ndarray],
    init_seed: int,
    artifact_id: str = "model",
    signature: Optional[Signature] = None,
    featurizer_spec: Optional[dict] = None,
    label_vocab: Optional[list] = None,
    fingerprint: Optional[str] = None,
) -> ModelArtifact:
    """Reset the derived architecture to its seeded initial weights (identical
    to the pre-search state) and train it privately from scratch."""
    widths = tuple(widths)
    for block, w in zip(space.blocks, widths):
        if w not in block.candidates:
            raise InvalidParameter(f"width {w} not a candidate of its block")
    layers = space.architecture_layers(widths)
    weights = initial_weights_for(space, widths, init_seed)
    model = Mlp(space.in_dim, layers, weights)
    x, y = data
    if config.steps > 0:
        model, accounted, epsilon = train_with_dpsgd(model, x, y, config)
    else:
        accounted, epsilon = 0, epsilon_for_config(config, steps=0)
    trained_with_dp = config.noise_multiplier > 0 or accounted == 0
    provenance = Provenance(
        trained_with_dp=trained_with_dp,
        epsilon_spent=epsilon if trained_with_dp else None,
        dataset_fingerprint=fingerprint,
        frozen_prefix_layers=0,
    )
    return ModelArtifact(
        id=artifact_id,
        signature=signature or Signature(("float64",), "int64", "classification"),
        in_dim=space.in_dim,
        layers=layers,
        weights=model.weights,
        provenance=provenance,
        featurizer_spec=featurizer_spec,
        label_vocab=label_vocab,
        accounting=accounting_receipt(config, accounted, epsilon),
    )
