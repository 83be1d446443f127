"""sparseconv: a CPU convolution engine exploiting semi-structured
activation sparsity, plus the training harness that induces it.

Feature maps are masked per spatial output position, all channels at
once.  The inference engine skips masked positions while building its
im2col indirection buffer, runs a standard dense GEMM over the retained
columns only, and re-inserts exact zeros afterwards, so compute scales
with the kept fraction.  The trainer induces the matching sparsity with
random spatial masks propagated across layer resolutions, a cubic
sparsity ramp, and mask freezing for the final stretch of training.
"""

from .bench import BenchRecord, bench_model, read_records, write_records
from .data import CLASS_NAMES, batch_stream, make_shapes_dataset
from .engine import (
    PAD,
    IndirectionBuffer,
    MacCounter,
    PackedActivations,
    build_indirection,
    low_rank_gemm,
    mac_counter,
    pack_columns,
    scatter_zeros,
    sparse_conv2d,
)
from .graph import (
    EquivalenceReport,
    FcWeights,
    LayerSpec,
    ModelFormatError,
    ModelGraph,
    SparsityConfig,
    infer,
    load_model,
    load_model_file,
    masks_for_graph,
    save_model,
    save_model_file,
    verify_equivalence,
)
from .masks import (
    MaskFormatError,
    SparsitySchedule,
    SpatialMask,
    downsample_score,
    load_masks,
    mask_set_digest,
    masks_from_bytes,
    masks_to_bytes,
    propagate_masks,
    random_score2d,
    rank_and_mask,
    save_masks,
    sparsity_at_step,
)
from .models import BUILTINS, build_builtin, resnet18_shape, toy_cnn, two_conv_net
from .ops import (
    ConfigurationError,
    ConvParams,
    WeightMatrix,
    direct_conv2d,
    elementwise_add,
    fully_connected,
    global_avg_pool,
    pool2d,
    relu,
)
from .training import (
    StepLog,
    TrainResult,
    TrainState,
    adam_step,
    evaluate,
    graph_params,
    loss_and_grads,
    masked_forward,
    softmax_cross_entropy,
    train,
    write_training_log,
)

__version__ = "0.1.0"

__all__ = [
    "BenchRecord", "bench_model", "read_records", "write_records",
    "CLASS_NAMES", "batch_stream", "make_shapes_dataset",
    "PAD", "IndirectionBuffer", "MacCounter", "PackedActivations",
    "build_indirection", "low_rank_gemm", "mac_counter", "pack_columns",
    "scatter_zeros", "sparse_conv2d",
    "EquivalenceReport", "FcWeights", "LayerSpec", "ModelFormatError",
    "ModelGraph", "SparsityConfig", "infer", "load_model", "load_model_file",
    "masks_for_graph", "save_model", "save_model_file", "verify_equivalence",
    "MaskFormatError", "SparsitySchedule", "SpatialMask", "downsample_score",
    "load_masks", "mask_set_digest", "masks_from_bytes", "masks_to_bytes",
    "propagate_masks", "random_score2d", "rank_and_mask", "save_masks",
    "sparsity_at_step",
    "BUILTINS", "build_builtin", "resnet18_shape", "toy_cnn", "two_conv_net",
    "ConfigurationError", "ConvParams", "WeightMatrix", "direct_conv2d",
    "elementwise_add", "fully_connected", "global_avg_pool", "pool2d", "relu",
    "StepLog", "TrainResult", "TrainState", "adam_step", "evaluate",
    "graph_params", "loss_and_grads", "masked_forward", "softmax_cross_entropy",
    "train", "write_training_log",
    "__version__",
]
