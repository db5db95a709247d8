"""Minimal float64 reverse-mode autodiff for the segmentation network."""
from .gradcheck import GradCheckReport, check_gradients, grad_check, relative_error
from .ops import (
    BatchNorm,
    add,
    batch_norm,
    concat,
    cross_entropy,
    gather,
    matmul,
    record_decisions,
    max_reduce,
    mul,
    pointwise_affine,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
    tsum,
    weighted_gather,
)
from .tensor import DimensionError, Parameter, Tensor

__all__ = [
    "BatchNorm",
    "DimensionError",
    "Parameter",
    "Tensor",
    "add",
    "batch_norm",
    "concat",
    "cross_entropy",
    "gather",
    "grad_check",
    "check_gradients",
    "GradCheckReport",
    "record_decisions",
    "matmul",
    "max_reduce",
    "mul",
    "pointwise_affine",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "transpose",
    "tsum",
    "weighted_gather",
]
