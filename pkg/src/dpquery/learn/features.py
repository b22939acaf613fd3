"""Deterministic featurizers mapping tuple values to model input vectors.

All hashing is crc32-based so feature vectors are stable across platforms
and sessions; featurizer specs serialize to JSON inside model artifacts.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np


def _bucket(text: str, salt: int, dim: int) -> int:
    return zlib.crc32(f"{salt}:{text}".encode()) % dim


@dataclass(frozen=True)
class CueVocabFeaturizer:
    """Counts of a fixed vocabulary's words; exact for planted-cue corpora."""

    vocab: tuple[str, ...]

    @property
    def dim(self) -> int:
        return len(self.vocab)

    def __call__(self, values: Sequence) -> np.ndarray:
        tokens = " ".join(str(v) for v in values).lower().split()
        vec = np.zeros(len(self.vocab))
        index = {w: i for i, w in enumerate(self.vocab)}
        for tok in tokens:
            if tok in index:
                vec[index[tok]] += 1.0
        return vec

    def spec(self) -> dict:
        return {"kind": "cue_vocab", "vocab": list(self.vocab)}


@dataclass(frozen=True)
class HashedTextFeaturizer:
    """Token-hashing bag of words over all input fields."""

    dim: int

    def __call__(self, values: Sequence) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in " ".join(str(v) for v in values).lower().split():
            vec[_bucket(tok, 0, self.dim)] += 1.0
        return vec

    def spec(self) -> dict:
        return {"kind": "hashed_text", "dim": self.dim}


@dataclass(frozen=True)
class FieldHashFeaturizer:
    """Per-field multi-hash one-hot encoding; distinct keys get (nearly always)
    distinct sparse patterns, which a small network can memorize exactly."""

    fields: int
    dim_per_field: int = 64
    hashes: int = 3

    @property
    def dim(self) -> int:
        return self.fields * self.dim_per_field

    def __call__(self, values: Sequence) -> np.ndarray:
        if len(values) != self.fields:
            raise ValueError(f"expected {self.fields} fields, got {len(values)}")
        vec = np.zeros(self.dim)
        for i, value in enumerate(values):
            base = i * self.dim_per_field
            for h in range(self.hashes):
                vec[base + _bucket(str(value), h * 7919 + i, self.dim_per_field)] += 1.0
        return vec

    def spec(self) -> dict:
        return {
            "kind": "field_hash",
            "fields": self.fields,
            "dim_per_field": self.dim_per_field,
            "hashes": self.hashes,
        }


@dataclass(frozen=True)
class NumericFeaturizer:
    """Raw numeric fields with per-field scaling (for range-endpoint encodings)."""

    fields: int
    scales: tuple[float, ...] = ()

    @property
    def dim(self) -> int:
        return self.fields

    def __call__(self, values: Sequence) -> np.ndarray:
        if len(values) != self.fields:
            raise ValueError(f"expected {self.fields} fields, got {len(values)}")
        scales = self.scales or tuple(1.0 for _ in range(self.fields))
        return np.array([float(v) * s for v, s in zip(values, scales)])

    def spec(self) -> dict:
        return {"kind": "numeric", "fields": self.fields, "scales": list(self.scales)}


def featurizer_from_spec(spec: dict):
    kind = spec["kind"]
    if kind == "cue_vocab":
        return CueVocabFeaturizer(tuple(spec["vocab"]))
    if kind == "hashed_text":
        return HashedTextFeaturizer(spec["dim"])
    if kind == "field_hash":
        return FieldHashFeaturizer(spec["fields"], spec["dim_per_field"], spec["hashes"])
    if kind == "numeric":
        return NumericFeaturizer(spec["fields"], tuple(spec.get("scales", ())))
    raise ValueError(f"unknown featurizer kind {kind}")


def featurize_rows(featurizer, rows: Sequence[Sequence]) -> np.ndarray:
    return np.stack([featurizer(row) for row in rows]) if rows else np.zeros((0, featurizer.dim))
