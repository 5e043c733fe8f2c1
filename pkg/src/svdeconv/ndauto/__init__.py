"""Small dense-array reverse-mode differentiation engine on top of numpy."""
from .fftconv import fft_conv2d_same
from .gradcheck import gradient_check
from .ops import (
    add,
    avg_pool2,
    concat_channels,
    conv2d_same,
    conv2d_same_transpose,
    crop,
    div,
    gelu,
    global_avg_pool,
    layer_norm_channels,
    matmul,
    mean_all,
    mul,
    reshape,
    sigmoid,
    split_channels,
    square,
    sub,
    sum_all,
    upsample2,
)
from .tensor import DTYPES, Parameter, Tape, Tensor, active_tape, as_tensor, backward

__all__ = [
    "DTYPES", "Parameter", "Tape", "Tensor", "active_tape", "add", "as_tensor", "avg_pool2",
    "backward", "concat_channels", "conv2d_same", "conv2d_same_transpose", "crop", "div",
    "fft_conv2d_same", "gelu", "global_avg_pool", "gradient_check", "layer_norm_channels",
    "matmul", "mean_all", "mul", "reshape", "sigmoid", "split_channels", "square", "sub",
    "sum_all", "upsample2",
]
