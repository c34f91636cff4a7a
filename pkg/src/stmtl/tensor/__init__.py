"""Minimal dense-tensor engine with reverse-mode differentiation."""
from .core import Tensor, no_grad, is_grad_enabled, tensor, zeros, ones, zero_grads
from .ops import (
    add, sub, mul, div, hadamard, scale, neg, sigmoid, tanh, relu, exp, log, clip,
    sum, mean, reshape, index, concat, split, conv2d, conv_transpose2d,
    global_avg_pool, avg_downsample, batch_norm, logsumexp, elementwise, pool_reduce,
)
from .gradcheck import gradcheck
from .io import save_tensor, load_tensor, save_archive, load_archive, archive_bytes


def backward(root: Tensor) -> None:
    root.backward()
