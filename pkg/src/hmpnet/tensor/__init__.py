"""NCHW tensors, differentiable primitives, and reverse-mode autodiff."""
from .core import (NonFiniteError, Parameter, Tape, Tensor, active_tape, backward, default_dtype,
                   float64_mode, set_finite_checks)
from .gradcheck import check_gradients, fd_grad, relative_error
from .ops import (add, as_tensor, bce_with_logits, bias_add, channel_affine, channel_slice, concat_channels,
                  conv2d, conv_out_size, div, exp, getitem, global_avg_pool, group_norm, linear, log, matmul,
                  maximum, maxpool2d, mean, minimum, mul, pad2d, reshape, sigmoid, silu, softmax, softplus,
                  split_channels, sub, sum, transpose, upsample_nearest2x)

__all__ = [
    "NonFiniteError", "Parameter", "Tape", "Tensor", "active_tape", "backward", "default_dtype",
    "float64_mode", "set_finite_checks", "check_gradients", "fd_grad", "relative_error",
    "add", "as_tensor", "bce_with_logits", "bias_add", "channel_affine", "channel_slice", "concat_channels",
    "conv2d", "conv_out_size", "div", "exp", "getitem", "global_avg_pool", "group_norm", "linear", "log",
    "matmul", "maximum", "maxpool2d", "mean", "minimum", "mul", "pad2d", "reshape", "sigmoid", "silu",
    "softmax", "softplus", "split_channels", "sub", "sum", "transpose", "upsample_nearest2x",
]
