from .nn import LayerSpec, Mlp, forward_backward
from .registry import ModelArtifact, ModelRegistry, Provenance, Signature, registry_match
from .dnas import BlockSpec, SearchSpace, dnas_search, finalize_with_dpsgd
from .knn import NoisyStore, build_noisy_store, knn_predict

__all__ = [
    "LayerSpec",
    "Mlp",
    "forward_backward",
    "ModelArtifact",
    "ModelRegistry",
    "Provenance",
    "Signature",
    "registry_match",
    "BlockSpec",
    "SearchSpace",
    "dnas_search",
    "finalize_with_dpsgd",
    "NoisyStore",
    "build_noisy_store",
    "knn_predict",
]
