"""Minimal float32 tensor library with reverse-mode autodiff."""

from .tensor import (
    DTYPE,
    ContractError,
    DimensionError,
    Tensor,
    add,
    amax,
    as_tensor,
    concat,
    default_dtype,
    detach,
    div,
    exp,
    hardtanh,
    is_grad_enabled,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    ones,
    parameter,
    power,
    precision,
    relu,
    reshape,
    softmax,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
    weighted_sum,
    zeros,
)
from .functional import (
    avg_pool2d,
    batch_norm,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    linear,
    max_pool2d,
)
from .gradcheck import central_difference, gradcheck

__all__ = [name for name in dir() if not name.startswith("_")]
