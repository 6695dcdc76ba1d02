"""Tensor engine, parameter store, and gradient checking."""

from .tensor import (
    NEG_INF,
    Tensor,
    absolute,
    add,
    as_tensor,
    attention,
    bilinear_sample,
    concat,
    conv2d,
    extract_windows,
    gather_flat,
    getitem,
    grad_enabled,
    layer_norm,
    linear,
    log_clamped,
    matmul,
    mul,
    no_grad,
    pad_hw,
    relu,
    reshape,
    sample_volumes,
    sigmoid,
    softmax,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
    upsample_bilinear,
)
from .params import ParamStore, add_conv, add_linear, uniform_init
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "NEG_INF",
    "Tensor",
    "absolute",
    "add",
    "as_tensor",
    "attention",
    "bilinear_sample",
    "concat",
    "conv2d",
    "extract_windows",
    "gather_flat",
    "getitem",
    "grad_enabled",
    "layer_norm",
    "linear",
    "log_clamped",
    "matmul",
    "mul",
    "no_grad",
    "pad_hw",
    "relu",
    "reshape",
    "sample_volumes",
    "sigmoid",
    "softmax",
    "sub",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
    "upsample_bilinear",
    "ParamStore",
    "add_conv",
    "add_linear",
    "uniform_init",
    "GradCheckReport",
    "grad_check",
]
