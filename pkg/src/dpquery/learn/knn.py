"""Noisy-embedding store and exact-scan kNN prediction.

Each sensitive record is embedded once, clipped, perturbed with Gaussian
noise, and stored; queries are answered by majority vote over the k nearest
noisy embeddings. Releasing the store costs the single-release Gaussian
epsilon (records are disjoint, so per-record releases compose in parallel).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dp import NoiseStream, gaussian_perturb_embedding, gaussian_release_epsilon
from ..errors import EmptyStore, InvalidParameter


@dataclass
class NoisyStore:
    vectors: np.ndarray  # [n, d]
    labels: list
    clip_norm: float
    noise_multiplier: float
    epsilon_per_record: float

    def to_json(self) -> dict:
        return {
            "vectors": self.vectors.tolist(),
            "labels": self.labels,
            "clip_norm": self.clip_norm,
            "noise_multiplier": self.noise_multiplier,
            "epsilon_per_record": self.epsilon_per_record,
        }

    @classmethod
    def from_json(cls, data: dict) -> "NoisyStore":
        return cls(
            np.asarray(data["vectors"], dtype=np.float64),
            list(data["labels"]),
            data["clip_norm"],
            data["noise_multiplier"],
            data["epsilon_per_record"],
        )


def build_noisy_store(
    vectors: np.ndarray,
    labels: Sequence,
    clip_norm: float,
    noise_multiplier: float,
    delta: float,
    stream: NoiseStream,
) -> NoisyStore:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(labels):
        raise InvalidParameter("vectors/labels shape mismatch")
    if vectors.shape[0] == 0:
        noisy = vectors.copy()
    else:
        noisy = np.stack(
            [gaussian_perturb_embedding(v, clip_norm, noise_multiplier, stream)
             for v in vectors]
        )
    return NoisyStore(
        noisy,
        list(labels),
        clip_norm,
        noise_multiplier,
        gaussian_release_epsilon(noise_multiplier, delta),
    )


def knn_predict(query: np.ndarray, store: NoisyStore, k: int = 5):
    """Majority vote over the k nearest neighbors (exact l2 scan); ties break
    toward the label with the smallest summed distance."""
    if store.vectors.shape[0] == 0:
        raise EmptyStore("noisy store is empty")
    if k < 1:
        raise InvalidParameter("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    dists = np.linalg.norm(store.vectors - query[None, :], axis=1)
    order = np.argsort(dists, kind="stable")[: min(k, len(dists))]
    votes: dict = {}
    for idx in order:
        label = store.labels[int(idx)]
        count, total = votes.get(label, (0, 0.0))
        votes[label] = (count + 1, total + float(dists[int(idx)]))
    return max(votes.items(), key=lambda kv: (kv[1][0], -kv[1][1]))[0]
