"""Prune-and-merge token compression for vision transformers."""

__version__ = "0.1.0"

from .compression import (CompressedModel, CompressionPlan, MergeMatrix,
                          compress_model, generate_merge_matrix, global_plan,
                          grouped_merge, identity_plan, pseudoinverse)
from .data import Dataset, load_idx_pair, synthetic_shapes
from .finetune import (DistillConfig, evaluate_accuracy, finetune,
                       train_baseline)
from .flops import block_flops, micro_benchmark, model_flops, overhead_flops
from .scoring import ScorerVariant, collect_scores
from .tensor import Tensor, backward
from .vit import ModelConfig, VisionTransformer

__all__ = [
    "CompressedModel",
    "CompressionPlan",
    "Dataset",
    "DistillConfig",
    "MergeMatrix",
    "ModelConfig",
    "ScorerVariant",
    "Tensor",
    "VisionTransformer",
    "__version__",
    "backward",
    "block_flops",
    "collect_scores",
    "compress_model",
    "evaluate_accuracy",
    "finetune",
    "generate_merge_matrix",
    "global_plan",
    "grouped_merge",
    "identity_plan",
    "load_idx_pair",
    "micro_benchmark",
    "model_flops",
    "overhead_flops",
    "pseudoinverse",
    "synthetic_shapes",
    "train_baseline",
]
