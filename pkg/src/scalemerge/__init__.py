"""Checkpoint merging (averaging, task arithmetic, TIES, DARE-TIES) plus grid and report tooling."""

__version__ = "0.1.0"

from .merge_core import (  # noqa: E402
    MergeRecipe,
    RecipeError,
    compute_task_vector,
    dare_prune,
    disjoint_merge,
    elect_signs,
    merge_average,
    merge_checkpoints,
    merge_dare_ties,
    merge_task_arithmetic,
    merge_ties,
    run_recipe,
    trim_by_magnitude,
)
from .tensor_store import (  # noqa: E402
    CheckpointError,
    CheckpointManifest,
    DenseTensor,
    StructureMismatch,
    TensorMeta,
    open_checkpoint,
    read_tensor,
    write_checkpoint,
)
