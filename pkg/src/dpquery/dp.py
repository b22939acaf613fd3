"""Differential-privacy mechanisms, per-example-clipped SGD, RDP accounting.

Accounting is deliberately conservative: each Gaussian step contributes
RDP(alpha) = alpha / (2 sigma^2) regardless of the sampling rate, so reported
epsilons upper-bound the amplified analysis. Noise is drawn from a
counter-based Philox generator (Gaussian via Box-Muller, Laplace via inverse
CDF) so runs replay bit-identically from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidParameter, NonFiniteGradient

RDP_ORDERS = (1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0)


class NoiseStream:
    """Seeded counter-based PRNG for all mechanism noise."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def gaussian(self, std: float, n: int) -> np.ndarray:
        """Box-Muller transform over uniform draws."""
        pairs = (n + 1) // 2
        u1 = np.clip(self._gen.random(pairs), 1e-300, None)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return std * z[:n]

    def laplace(self, scale: float, n: int) -> np.ndarray:
        """Inverse-CDF sampling: x = -b sign(u) ln(1 - 2|u|), u ~ U(-1/2, 1/2)."""
        u = self._gen.random(n) - 0.5
        return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def spawn(self, tag: str) -> "NoiseStream":
        """Derive an independent child stream deterministically."""
        import zlib

        return NoiseStream((self.seed * 1000003 + zlib.crc32(tag.encode())) % 2**63)


@dataclass
class DpSgdConfig:
    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    steps: int
    learning_rate: float
    delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise InvalidParameter("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise InvalidParameter("noise_multiplier must be nonnegative")
        if not (0 < self.sampling_rate <= 1):
            raise InvalidParameter("sampling_rate must be in (0, 1]")
        if self.steps < 0:
            raise InvalidParameter("steps must be nonnegative")
        if self.learning_rate <= 0:
            raise InvalidParameter("learning_rate must be positive")
        if not (0 < self.delta < 1):
            raise InvalidParameter("delta must be in (0, 1)")

    def to_json(self) -> dict:
        return {
            "clip_norm": self.clip_norm,
            "noise_multiplier": self.noise_multiplier,
            "sampling_rate": self.sampling_rate,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "delta": self.delta,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DpSgdConfig":
        return cls(**data)


@dataclass(frozen=True)
class RdpCurve:
    values: tuple[float, ...]
    orders: tuple[float, ...] = RDP_ORDERS

    def __post_init__(self):
        if len(self.values) != len(self.orders):
            raise InvalidParameter("curve length does not match order grid")
        if any(v < 0 for v in self.values):
            raise InvalidParameter("RDP values must be nonnegative")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise InvalidParameter("cannot compose curves over different order grids")
        return RdpCurve(tuple(a + b for a, b in zip(self.values, other.values)), self.orders)


def zero_curve() -> RdpCurve:
    return RdpCurve(tuple(0.0 for _ in RDP_ORDERS))


def rdp_compose_gaussian(noise_multiplier: float, steps: int, sampling_rate: float = 1.0) -> RdpCurve:
    """RDP of `steps` Gaussian mechanism invocations at the given multiplier.

    The sampling rate is recorded by callers but not used: no subsampling
    amplification, so the curve never understates the privacy loss.
    """
    if noise_multiplier <= 0:
        raise InvalidParameter("noise_multiplier must be positive (epsilon is infinite at 0)")
    if steps < 0:
        raise InvalidParameter("steps must be nonnegative")
    if not (0 < sampling_rate <= 1):
        raise InvalidParameter("sampling_rate must be in (0, 1]")
    per_step = 1.0 / (2.0 * noise_multiplier**2)
    return RdpCurve(tuple(steps * alpha * per_step for alpha in RDP_ORDERS))


def to_epsilon(curve: RdpCurve, delta: float) -> float:
    """Convert RDP to (epsilon, delta)-DP: min over orders of
    RDP(alpha) + ln(1/delta) / (alpha - 1)."""
    if not (0 < delta < 1):
        raise InvalidParameter("delta must be in (0, 1)")
    log_term = math.log(1.0 / delta)
    return min(
        value + log_term / (alpha - 1.0)
        for alpha, value in zip(curve.orders, curve.values)
    )


def epsilon_for_config(config: DpSgdConfig, steps: Optional[int] = None) -> float:
    """Privacy cost of a DP-SGD run; infinite when no noise is added."""
    t = config.steps if steps is None else steps
    if t == 0:
        return to_epsilon(zero_curve(), config.delta)
    if config.noise_multiplier == 0:
        return math.inf
    return to_epsilon(
        rdp_compose_gaussian(config.noise_multiplier, t, config.sampling_rate), config.delta
    )


def gaussian_release_epsilon(noise_multiplier: float, delta: float) -> float:
    """Epsilon of a single Gaussian release at sensitivity-relative noise sigma."""
    if noise_multiplier <= 0:
        return math.inf
    return to_epsilon(rdp_compose_gaussian(noise_multiplier, 1), delta)


# --- mechanisms ---------------------------------------------------------------

def laplace_mechanism(true_value: float, sensitivity: float, epsilon: float,
                      stream: NoiseStream) -> float:
    if sensitivity <= 0:
        raise InvalidParameter("sensitivity must be positive")
    if epsilon <= 0:
        raise InvalidParameter("epsilon must be positive")
    if math.isinf(epsilon):
        return float(true_value)
    scale = sensitivity / epsilon
    return float(true_value + stream.laplace(scale, 1)[0])


def clip_rows(per_example: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale each row to l2 norm at most clip_norm."""
    norms = np.linalg.norm(per_example, axis=1, keepdims=True)
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return per_example * factors


def dp_sgd_step(
    weights: np.ndarray,
    per_example_grads: np.ndarray,
    config: DpSgdConfig,
    stream: NoiseStream,
) -> tuple[np.ndarray, Optional[RdpCurve]]:
    """One DP-SGD update on a flat weight vector.

    Returns the new weights and the accounting increment, None when
    noise_multiplier is 0 (not privately accounted).
    """
    if per_example_grads.ndim != 2 or per_example_grads.shape[0] == 0:
        raise InvalidParameter("need a nonempty batch of per-example gradients")
    if not np.all(np.isfinite(per_example_grads)):
        raise NonFiniteGradient("gradient batch contains non-finite values")
    batch = per_example_grads.shape[0]
    clipped = clip_rows(per_example_grads, config.clip_norm)
    total = clipped.sum(axis=0)
    if config.noise_multiplier > 0:
        noise = stream.gaussian(config.noise_multiplier * config.clip_norm, total.shape[0])
        total = total + noise
        increment = rdp_compose_gaussian(config.noise_multiplier, 1, config.sampling_rate)
    else:
        increment = None
    new_weights = weights - config.learning_rate * total / batch
    return new_weights, increment


def gaussian_perturb_embedding(
    vector: np.ndarray,
    clip_norm: float,
    noise_multiplier: float,
    stream: NoiseStream,
) -> np.ndarray:
    """Clip a vector to l2 norm clip_norm, then add N(0, (sigma*clip_norm)^2 I)."""
    if clip_norm <= 0:
        raise InvalidParameter("clip_norm must be positive")
    if noise_multiplier < 0:
        raise InvalidParameter("noise_multiplier must be nonnegative")
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm > clip_norm:
        vector = vector * (clip_norm / norm)
    if noise_multiplier == 0:
        return vector.copy()
    return vector + stream.gaussian(noise_multiplier * clip_norm, vector.shape[0])


def accounting_receipt(config: DpSgdConfig, steps: int, epsilon: float) -> dict:
    """JSON accounting receipt for a completed training run."""
    return {
        "noise_multiplier": config.noise_multiplier,
        "C": config.clip_norm,
        "T": steps,
        "q": config.sampling_rate,
        "delta": config.delta,
        "epsilon": epsilon,
        "orders_used": list(RDP_ORDERS),
        "search_budget_free": True,  # architecture search weights are never released
    }
