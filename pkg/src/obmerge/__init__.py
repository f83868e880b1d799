"""Checkpoint merging toolkit.

Composes task-specialized model checkpoints at the parameter level:
task arithmetic, TIES-style trim/sign-consensus, DARE drop-and-rescale,
and activation-aware saliency (optimal-brain) merging, plus a calibration
engine, module-routing transplants, and a toy network family for exact
desk-scale validation.
"""

__version__ = "0.1.0"

from .errors import (
    ContainerError,
    FingerprintMismatch,
    MergeError,
    ObmergeError,
    RecipeError,
    ShapeMismatch,
    StatsError,
    ValidationError,
)
from .mergers import (
    MergePolicy,
    aggregate,
    combine,
    dare_sparsify,
    elect_signs,
    merge_obm,
    merge_ta,
    trim_magnitude,
    trim_saliency,
)
from .saliency import (
    ActivationStats,
    SaliencyMap,
    accumulate_stats,
    default_layer_map,
    hessian_diag,
    merge_stats,
    score,
)
from .task_vectors import (
    RoutingRule,
    TaskVector,
    apply,
    compute_delta,
    manifest_fingerprint,
)
from .tensor_store import (
    Checkpoint,
    Tensor,
    checkpoint_bytes,
    read_checkpoint,
    write_checkpoint,
)

__all__ = [
    "ActivationStats",
    "Checkpoint",
    "ContainerError",
    "FingerprintMismatch",
    "MergeError",
    "MergePolicy",
    "ObmergeError",
    "RecipeError",
    "RoutingRule",
    "SaliencyMap",
    "ShapeMismatch",
    "StatsError",
    "TaskVector",
    "Tensor",
    "ValidationError",
    "accumulate_stats",
    "aggregate",
    "apply",
    "checkpoint_bytes",
    "combine",
    "compute_delta",
    "dare_sparsify",
    "default_layer_map",
    "elect_signs",
    "hessian_diag",
    "manifest_fingerprint",
    "merge_obm",
    "merge_stats",
    "merge_ta",
    "read_checkpoint",
    "score",
    "trim_magnitude",
    "trim_saliency",
    "write_checkpoint",
]
