"""Parallel-circuit networks with dropout variants and a benchmark harness."""

from .rng import RngKey, bernoulli_stream, permutation, uniform_stream
from .linalg import matmul, softmax, tanh_map
from .network import (
    ForwardTrace,
    Gradients,
    Parameters,
    Topology,
    backward,
    build_network,
    count_connections,
    embed_as_single_circuit,
    forward,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
)
from .dropout import (
    DropoutPolicy,
    FixedMaskTable,
    MaskSet,
    apply_mask,
    fixed_table_init,
    inference_scale,
    sample_circuit_mask,
    sample_node_masks,
)
from .training import (
    Hyperparams,
    TrialResult,
    Velocity,
    evaluate,
    grad_check,
    sgd_step,
    train,
)
from .datasets import (
    CsvSchema,
    Dataset,
    SplitSpec,
    load_csv,
    load_idx,
    normalize,
    split,
    synthetic_blobs,
    write_idx,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
