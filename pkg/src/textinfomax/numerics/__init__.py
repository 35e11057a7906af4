"""Dense tensors, reverse-mode gradients and the Adam optimizer."""

from .gradcheck import check_gradients, numerical_gradient, relative_error
from .ops import (
    DegenerateBatchError,
    DimensionError,
    RunningStats,
    add,
    batch_norm,
    concat,
    conv2d,
    diagonal,
    div,
    dot,
    exp,
    getitem,
    linear,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    pool_avg,
    relu,
    reshape,
    sigmoid,
    softplus,
    square,
    stack,
    sub,
    sum,
    transpose,
)
from .optim import Adam, AdamState, adam_step
from .tensor import GraphError, NumericError, Tensor, as_tensor, backward

__all__ = [
    "Adam", "AdamState", "DegenerateBatchError", "DimensionError", "GraphError", "NumericError",
    "RunningStats", "Tensor", "adam_step", "add", "as_tensor", "backward", "batch_norm",
    "check_gradients", "concat", "conv2d", "diagonal", "div", "dot", "exp", "getitem", "linear",
    "log", "log_softmax", "logsumexp", "matmul", "mean", "mul", "neg", "numerical_gradient",
    "pool_avg", "relative_error", "relu", "reshape", "sigmoid", "softplus", "square", "stack",
    "sub", "sum", "transpose",
]
