from .tensor import (
    LN_EPS,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    concat,
    cross_entropy,
    einsum,
    embedding,
    exp,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    slice_,
    softmax,
    softmax_lastdim,
    sub,
    sum_,
    tanh,
    transpose,
    window_gather,
)
from .gradcheck import check_params, finite_diff_check, rel_error

__all__ = [
    "LN_EPS", "ShapeError", "Tape", "Tensor", "add", "as_tensor", "check_params", "concat",
    "cross_entropy", "einsum", "embedding", "exp", "finite_diff_check", "gelu", "layer_norm",
    "linear", "log_softmax", "rel_error", "matmul", "mean", "mul", "reshape", "scale", "slice_", "softmax",
    "softmax_lastdim", "sub", "sum_", "tanh", "transpose", "window_gather",
]
