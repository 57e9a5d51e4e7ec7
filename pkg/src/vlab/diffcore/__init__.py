"""Minimal reverse-mode tensor engine; every other module builds on it."""

from .container import load_tensor, read_tensor, save_tensor, write_tensor
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    default_dtype,
    enable_guard,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    pow_scalar,
    reshape,
    set_default_dtype,
    softmax,
    sum_,
    take_rows,
    topo_order,
    transpose,
)

__all__ = [
    "GradCheckReport",
    "Tensor",
    "add",
    "concat",
    "cross_entropy",
    "default_dtype",
    "enable_guard",
    "gelu",
    "getitem",
    "grad_check",
    "grad_check_params",
    "is_grad_enabled",
    "layer_norm",
    "load_tensor",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pow_scalar",
    "read_tensor",
    "reshape",
    "save_tensor",
    "set_default_dtype",
    "softmax",
    "sum_",
    "take_rows",
    "topo_order",
    "transpose",
    "write_tensor",
]
