"""Model artifacts, on-disk format, and the pre-trained model registry.

Artifact files are a JSON header (signature, architecture, provenance,
inference metadata, weight offset/count) followed by the raw little-endian
float64 weight array.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import InvalidParameter, ModelMissing
from .features import featurizer_from_spec
from .nn import LayerSpec, Mlp, param_count

TASKS = ("classification", "regression", "blob-retrieval", "embedding")


@dataclass(frozen=True)
class Signature:
    input_types: tuple[str, ...]
    output_type: str
    task: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidParameter(f"unknown task {self.task}")

    def to_json(self) -> dict:
        return {
            "input_types": list(self.input_types),
            "output_type": self.output_type,
            "task": self.task,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Signature":
        return cls(tuple(data["input_types"]), data["output_type"], data["task"])


@dataclass
class Provenance:
    trained_with_dp: bool
    epsilon_spent: Optional[float] = None
    dataset_fingerprint: Optional[str] = None
    frozen_prefix_layers: int = 0

    def __post_init__(self):
        if self.trained_with_dp and self.epsilon_spent is None:
            raise InvalidParameter("DP-trained artifacts must record epsilon_spent")
        if not self.trained_with_dp and self.epsilon_spent is not None:
            raise InvalidParameter("epsilon_spent present without DP training")

    def to_json(self) -> dict:
        return {
            "trained_with_dp": self.trained_with_dp,
            "epsilon_spent": self.epsilon_spent,
            "dataset_fingerprint": self.dataset_fingerprint,
            "frozen_prefix_layers": self.frozen_prefix_layers,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Provenance":
        return cls(
            data["trained_with_dp"],
            data.get("epsilon_spent"),
            data.get("dataset_fingerprint"),
            data.get("frozen_prefix_layers", 0),
        )


@dataclass
class ModelArtifact:
    id: str
    signature: Signature
    in_dim: int
    layers: list[LayerSpec]
    weights: np.ndarray
    provenance: Provenance
    featurizer_spec: Optional[dict] = None
    label_vocab: Optional[list] = None
    created_seq: int = 0
    output_scale: float = 1.0
    output_shift: float = 0.0
    accounting: Optional[dict] = None  # DP-SGD accounting receipt

    def __post_init__(self):
        expected = param_count(self.in_dim, self.layers)
        if self.weights.shape != (expected,):
            raise InvalidParameter(
                f"artifact {self.id}: weight count {self.weights.shape} != {expected}"
            )

    def mlp(self) -> Mlp:
        return Mlp(self.in_dim, self.layers, self.weights)

    def featurizer(self):
        if self.featurizer_spec is None:
            raise InvalidParameter(f"artifact {self.id} has no featurizer")
        return featurizer_from_spec(self.featurizer_spec)

    def predict_value(self, values: Sequence):
        return self.predict_batch([values])[0]

    def predict_batch(self, rows: Sequence[Sequence]) -> list:
        featurizer = self.featurizer()
        if not rows:
            return []
        x = np.stack([featurizer(r) for r in rows])
        out = self.mlp().predict(x)
        if self.signature.task in ("classification", "blob-retrieval"):
            idxs = np.argmax(out, axis=1)
            if self.label_vocab is None:
                return [int(i) for i in idxs]
            return [self.label_vocab[int(i)] for i in idxs]
        return [float(v) * self.output_scale + self.output_shift for v in out[:, 0]]

    def embed_batch(self, rows: Sequence[Sequence]) -> np.ndarray:
        """Raw output vectors (for embedding-task artifacts)."""
        featurizer = self.featurizer()
        x = np.stack([featurizer(r) for r in rows])
        return self.mlp().predict(x)


def dataset_fingerprint(payload: bytes) -> str:
    """64-bit content hash of canonical table bytes."""
    return hashlib.sha256(payload).hexdigest()[:16]


def save_artifact(artifact: ModelArtifact, path: str | Path) -> None:
    weights = np.ascontiguousarray(artifact.weights, dtype="<f8")
    header = {
        "id": artifact.id,
        "signature": artifact.signature.to_json(),
        "architecture": {
            "in_dim": artifact.in_dim,
            "layers": [s.to_json() for s in artifact.layers],
        },
        "provenance": artifact.provenance.to_json(),
        "featurizer": artifact.featurizer_spec,
        "label_vocab": artifact.label_vocab,
        "created_seq": artifact.created_seq,
        "output_scale": artifact.output_scale,
        "output_shift": artifact.output_shift,
        "accounting": artifact.accounting,
        "weights_count": int(weights.size),
        "weights_offset": 0,
    }
    # the offset depends on the header length; iterate to a fixed point
    for _ in range(4):
        blob = json.dumps(header).encode()
        if header["weights_offset"] == len(blob):
            break
        header["weights_offset"] = len(blob)
    blob = json.dumps(header).encode()
    assert header["weights_offset"] == len(blob)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(weights.tobytes())


def load_artifact(path: str | Path) -> ModelArtifact:
    data = Path(path).read_bytes()
    depth = 0
    end = None
    for i, ch in enumerate(data):
        if ch == ord("{"):
            depth += 1
        elif ch == ord("}"):
            depth -= 1
            if depth == 0:
                end = i + 1
                break
    if end is None:
        raise InvalidParameter(f"no JSON header in {path}")
    header = json.loads(data[:end])
    offset, count = header["weights_offset"], header["weights_count"]
    weights = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return ModelArtifact(
        id=header["id"],
        signature=Signature.from_json(header["signature"]),
        in_dim=header["architecture"]["in_dim"],
        layers=[LayerSpec.from_json(s) for s in header["architecture"]["layers"]],
        weights=weights,
        provenance=Provenance.from_json(header["provenance"]),
        featurizer_spec=header.get("featurizer"),
        label_vocab=header.get("label_vocab"),
        created_seq=header.get("created_seq", 0),
        output_scale=header.get("output_scale", 1.0),
        output_shift=header.get("output_shift", 0.0),
        accounting=header.get("accounting"),
    )


@dataclass
class MatchResult:
    kind: str  # "exact" | "adapt"
    artifact: ModelArtifact
    frozen_prefix_layers: int = 0


def registry_match(signature: Signature, artifacts: Sequence[ModelArtifact]) -> Optional[MatchResult]:
    """Reuse policy: exact signature first, then same task + input types with a
    trainable-head adaptation; newest artifact wins ties."""
    exact = [a for a in artifacts if a.signature == signature]
    if exact:
        return MatchResult("exact", max(exact, key=lambda a: a.created_seq))
    adaptable = [
        a
        for a in artifacts
        if a.signature.task == signature.task
        and a.signature.input_types == signature.input_types
    ]
    if adaptable:
        best = max(adaptable, key=lambda a: a.created_seq)
        return MatchResult("adapt", best, frozen_prefix_layers=len(best.layers) - 1)
    return None


class ModelRegistry:
    """Disk-backed registry; concurrent reads, serialized writes."""

    def __init__(self, directory: Optional[str | Path] = None):
        self.directory = Path(directory) if directory else None
        self.artifacts: dict[str, ModelArtifact] = {}
        self._seq = 0
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.directory.glob("*.model")):
                artifact = load_artifact(path)
                self.artifacts[artifact.id] = artifact
                self._seq = max(self._seq, artifact.created_seq)

    def add(self, artifact: ModelArtifact) -> ModelArtifact:
        with self._lock:
            self._seq += 1
            artifact.created_seq = self._seq
            self.artifacts[artifact.id] = artifact
            if self.directory is not None:
                tmp = self.directory / f"{artifact.id}.model.tmp"
                save_artifact(artifact, tmp)
                tmp.replace(self.directory / f"{artifact.id}.model")
        return artifact

    def get(self, model_id: str) -> ModelArtifact:
        if model_id not in self.artifacts:
            raise ModelMissing(model_id)
        return self.artifacts[model_id]

    def match(self, signature: Signature) -> Optional[MatchResult]:
        return registry_match(signature, list(self.artifacts.values()))

    def __contains__(self, model_id: str) -> bool:
        return model_id in self.artifacts
