"""Minimal dense-tensor kernel with tape-based reverse-mode differentiation."""

from .tensor import (
    DimensionError,
    NumkitError,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    relu,
    repeat_rows,
    reshape,
    sigmoid,
    slice_cols,
    slice_rows,
    softmax,
    sub,
    sum_row_groups,
    take_entries,
    take_index,
    take_rows,
    tanh,
    tmean,
    transpose,
    tsum,
)
from .nn import (
    GRUParams,
    causal_mask,
    cross_entropy,
    embedding,
    feed_forward,
    finite_difference_check,
    gru_cell,
    layer_norm,
    linear,
    scaled_dot_attention,
    sequence_nll,
)

__all__ = [
    "DimensionError", "NumkitError", "Tape", "Tensor", "active_tape", "add",
    "as_tensor", "backward", "concat", "exp", "log", "log_softmax", "matmul",
    "mul", "neg", "relu", "repeat_rows", "reshape", "sigmoid", "slice_cols",
    "slice_rows", "softmax", "sub", "sum_row_groups", "take_entries",
    "take_index", "take_rows", "tanh", "tmean", "transpose", "tsum",
    "GRUParams", "causal_mask", "cross_entropy", "embedding", "feed_forward",
    "finite_difference_check", "gru_cell", "layer_norm", "linear",
    "scaled_dot_attention", "sequence_nll",
]
