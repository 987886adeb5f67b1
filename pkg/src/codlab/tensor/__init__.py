"""Minimal dense-tensor library with reverse-mode autodiff."""

from .adam import AdamState, adam_step, cosine_lr
from .core import NonFiniteError, Tape, Tensor, set_debug_checks
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    abs_,
    add,
    add_const,
    avgpool2d,
    batchnorm2d,
    bce_with_logits,
    bilinear_resize_array,
    concat_channels,
    conv2d,
    div,
    macs_counter,
    mean_all,
    mul,
    mul_const,
    relu,
    relu_margin_probe,
    resize_bilinear,
    resize_nearest,
    sigmoid,
    split_channels,
    sub,
    sum_all,
)

__all__ = [
    "AdamState",
    "GradCheckReport",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "abs_",
    "adam_step",
    "add",
    "add_const",
    "avgpool2d",
    "batchnorm2d",
    "bce_with_logits",
    "bilinear_resize_array",
    "concat_channels",
    "conv2d",
    "cosine_lr",
    "div",
    "grad_check",
    "macs_counter",
    "mean_all",
    "mul",
    "mul_const",
    "relu",
    "relu_margin_probe",
    "resize_bilinear",
    "resize_nearest",
    "set_debug_checks",
    "sigmoid",
    "split_channels",
    "sub",
    "sum_all",
]
