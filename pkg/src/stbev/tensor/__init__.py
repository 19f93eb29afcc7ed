"""Minimal dense tensors with tape-based reverse-mode gradients."""

from .checkpoint import checksum, load_checkpoint, save_checkpoint
from .core import (ConfigError, ShapeError, Tensor, as_tensor, backward, no_grad,
                   record_grad_targets)
from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .ops import (abs, add, broadcast_mul, channel_conv1d, clamp, concat, concat_channels,
                  conv1x1, dw_conv2d, exp, fully_connected, global_avg_pool, hadamard, index,
                  log, mean, mul, relu, reshape, sigmoid, softmax, sparse_warp, stack, sub, sum,
                  tanh)

__all__ = [
    "ConfigError", "ShapeError", "Tensor", "as_tensor", "backward", "no_grad",
    "record_grad_targets", "GradCheckReport", "finite_diff_check", "relative_error",
    "checksum", "load_checkpoint", "save_checkpoint",
    "abs", "add", "broadcast_mul", "channel_conv1d", "clamp", "concat", "concat_channels",
    "conv1x1", "dw_conv2d", "exp", "fully_connected", "global_avg_pool", "hadamard", "index",
    "log", "mean", "mul", "relu", "reshape", "sigmoid", "softmax", "sparse_warp", "stack",
    "sub", "sum", "tanh",
]
