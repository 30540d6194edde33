"""Compact reverse-mode automatic differentiation over 4-D numpy arrays."""

from .tensor import Tape, Tensor
from .ops import (
    abs_, add, cast, channel_avg, channel_max, clamp_min, concat_channels, constant, conv2d, crop, detach,
    div, gelu, global_avg_pool, integral_box_mean, global_max_pool, matmul, mean, mul, neg, relu, shift_matrix, sigmoid,
    spatial_shift, sqrt, square, sub, sum_, window_origins, windowed_mean,
)
from .gradcheck import GradCheckError, GradCheckReport, grad_check

OP_KINDS = (
    "add", "sub", "mul", "div", "sqrt", "square", "clamp_min", "abs", "sum", "mean", "windowed_mean",
    "conv2d", "matmul", "relu", "gelu", "sigmoid", "global_max_pool", "global_avg_pool",
    "channel_max", "channel_avg", "concat_channels", "spatial_shift", "crop", "detach", "cast",
)

__all__ = [
    "Tape", "Tensor", "grad_check", "GradCheckReport", "GradCheckError", "OP_KINDS",
    "abs_", "add", "cast", "channel_avg", "channel_max", "clamp_min", "concat_channels", "constant", "conv2d",
    "crop", "detach", "div", "gelu", "global_avg_pool", "integral_box_mean", "global_max_pool", "matmul", "mean", "mul",
    "neg", "relu", "shift_matrix", "sigmoid", "spatial_shift", "sqrt", "square", "sub", "sum_",
    "window_origins", "windowed_mean",
]
