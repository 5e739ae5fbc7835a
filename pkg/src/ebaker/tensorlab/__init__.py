"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import nn, ops
from .gradcheck import gradcheck, numeric_grad, relative_error
from .io import FormatError, load_tensors, loads_tensors, dumps_tensors, save_tensors
from .ops import (
    add,
    concat,
    cosine_rows,
    cross_entropy,
    einsum,
    embedding_lookup,
    exp,
    l2_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean_pool,
    mul,
    multiply,
    normalize,
    quick_gelu,
    scale,
    scaled_dot_product_attention,
    softmax,
    softmax_rows,
)
from .tensor import (
    Graph,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    TensorError,
    as_tensor,
    check_finite,
    no_grad,
)

__all__ = [
    "Graph", "GraphError", "NonFiniteError", "ShapeError", "Tensor", "TensorError", "FormatError",
    "add", "as_tensor", "check_finite", "concat", "cosine_rows", "cross_entropy", "dumps_tensors", "einsum",
    "embedding_lookup", "exp", "gradcheck", "l2_norm", "layer_norm", "load_tensors", "loads_tensors", "log",
    "log_softmax", "matmul", "mean_pool", "mul", "multiply", "nn", "no_grad", "normalize", "numeric_grad", "ops",
    "quick_gelu", "relative_error", "save_tensors", "scale", "scaled_dot_product_attention", "softmax",
    "softmax_rows",
]
