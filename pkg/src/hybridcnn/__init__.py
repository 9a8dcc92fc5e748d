"""hybridcnn: a from-scratch deep-learning engine and CLI for 4-class
CT-style image classification with dual residual branches fused into a
custom CNN through cosine-gated feature intersection."""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigurationError, DataError,
                     HybridCnnError, NumericsError)
from .tensor import GradTape, Tensor, backward
from .graphs import (BranchConfig, LayerSpec, ModelGraph, build_branch,
                     build_compact_cnn, build_custom_cnn, CLASS_LABELS)
from .fusion import FusionConfig, HybridModel, build_hybrid, intersect_features

__all__ = [
    "__version__",
    "HybridCnnError", "ConfigurationError", "DataError", "NumericsError", "CheckpointError",
    "Tensor", "GradTape", "backward",
    "LayerSpec", "ModelGraph", "BranchConfig", "CLASS_LABELS",
    "build_custom_cnn", "build_compact_cnn", "build_branch",
    "FusionConfig", "HybridModel", "build_hybrid", "intersect_features",
]
