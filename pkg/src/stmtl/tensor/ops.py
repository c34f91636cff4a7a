"""Differentiable operations on :class:`~stmtl.tensor.core.Tensor`.

Binary operations broadcast only along singleton axes of an operand with
the same rank (``[N,C,1,1]`` against ``[N,C,H,W]``, ``[B,n,1]`` against
``[B,1,m]``) or against a scalar.  Anything else raises ``ShapeError``.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DomainError, ShapeError
from .core import Tensor

__all__ = [
    "add", "sub", "mul", "div", "hadamard", "scale", "neg",
    "sigmoid", "tanh", "relu", "exp", "log", "clip",
    "sum", "mean", "reshape", "index", "concat", "split",
    "conv2d", "conv_transpose2d", "global_avg_pool", "avg_downsample",
    "batch_norm", "logsumexp", "elementwise", "pool_reduce",
]


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple:
    if a.shape == b.shape or a.size == 1 and a.ndim <= b.ndim or b.size == 1 and b.ndim <= a.ndim:
        return np.broadcast_shapes(a.shape, b.shape)
    if a.ndim == b.ndim and all(p == q or p == 1 or q == 1 for p, q in zip(a.shape, b.shape)):
        return np.broadcast_shapes(a.shape, b.shape)
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- pointwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), backward)


hadamard = mul


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive entry")
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "hadamard": mul}


def elementwise(name: str, *args) -> Tensor:
    """Dispatch a pointwise operation by name.

    ``scale`` takes ``(x, c)``; unary names take one tensor; binary names
    take two operands.
    """
    if name in _UNARY:
        return _UNARY[name](*args)
    if name in _BINARY:
        return _BINARY[name](*args)
    if name == "scale":
        return scale(*args)
    raise ContractError(f"unknown elementwise op {name!r}")


# -- reductions & reshaping --------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=True),)

    return Tensor.from_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice) indexing; gradient scatters back into a zero array."""
    src = x.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return Tensor.from_op(np.array(x.data[idx]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(p != q for i, (p, q) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    out = []
    for i in range(len(sizes)):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
        out.append(index(x, tuple(sl)))
    return out


def logsumexp(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor.from_op(out if keepdims else out.squeeze(axis), (x,), backward)


# -- convolution -------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Columns laid out as [C*kh*kw, N*Ho*Wo]."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        cols = _im2col(xp, kh, kw, stride)
    out = (w.reshape(f, -1) @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols, xp.shape, ho, wo


def _conv_input_grad(g: np.ndarray, w: np.ndarray, xp_shape: tuple, x_shape: tuple, stride: int, pad: int,
                     ho: int, wo: int) -> np.ndarray:
    f, c, kh, kw = w.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
    dcols = w.reshape(f, -1).T @ g2
    if kh == 1 and kw == 1:
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        dxp[:, :, ::stride, ::stride][:, :, :ho, :wo] = dcols.reshape(c, x_shape[0], ho, wo).transpose(1, 0, 2, 3)
    else:
        dxp = _col2im(dcols, xp_shape, kh, kw, stride, ho, wo)
    if pad:
        dxp = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.  ``x``: [N,C,H,W], ``w``: [F,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    kh, kw = w.shape[2:]
    if kh > x.shape[2] + 2 * pad or kw > x.shape[3] + 2 * pad:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    out, cols, xp_shape, ho, wo = _conv_forward(x.data, w.data, stride, pad)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)
    wd, x_shape = w.data, x.shape

    def backward(g):
        gx = _conv_input_grad(g, wd, xp_shape, x_shape, stride, pad, ho, wo) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (g.transpose(1, 0, 2, 3).reshape(wd.shape[0], -1) @ cols.T).reshape(wd.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`.  ``x``: [N,C,H,W], ``w``: [C,F,kh,kw].

    Output spatial size is ``(H-1)*stride - 2*pad + kh``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ContractError("conv_transpose2d: stride must be >= 1")
    n, c, h, wd_ = x.shape
    _, f, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd_ - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size for input {x.shape}, kernel {w.shape}")
    # seen as conv2d(y, w) with y of shape [N,F,ho,wo]: x plays the output gradient
    wk = w.data
    xs = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    full_shape = (n, f, ho + 2 * pad, wo + 2 * pad)
    out = _col2im(wk.reshape(c, -1).T @ xs, full_shape, kh, kw, stride, h, wd_)
    if pad:
        out = out[:, :, pad:pad + ho, pad:pad + wo]
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        cols = _im2col(gp, kh, kw, stride)  # [F*kh*kw, N*h*w]
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wk.reshape(c, -1) @ cols).reshape(c, n, h, wd_).transpose(1, 0, 2, 3)
        if w.requires_grad:
            gw = (xs @ cols.T).reshape(wk.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward)


# -- pooling -----------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Block-mean over non-overlapping ``factor x factor`` windows of the last two axes."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_downsample: spatial dims {(h, w)} not divisible by {factor}")
    blocks = x.data.reshape(*lead, h // factor, factor, w // factor, factor)
    out = blocks.mean(axis=(-3, -1))
    inv = 1.0 / (factor * factor)

    def backward(g):
        up = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (up * up.dtype.type(inv),)

    return Tensor.from_op(out, (x,), backward)


def pool_reduce(name: str, x: Tensor, factor: Optional[int] = None) -> Tensor:
    if name == "global_avg_pool":
        return global_avg_pool(x)
    if name == "avg_downsample":
        if factor is None:
            raise ContractError("avg_downsample needs a factor")
        return avg_downsample(x, factor)
    if name == "sum":
        return sum(x)
    if name == "mean":
        return mean(x)
    raise ContractError(f"unknown pool/reduce op {name!r}")


# -- normalization -----------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running statistics are applied.
    """
    xd = x.data
    c = xd.shape[1]
    if training:
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        m = xd.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (m / max(m - 1, 1))
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    g_ = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g_ + beta.data.reshape(1, c, 1, 1)

    def backward(dy):
        dgamma = (dy * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = dy.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = dy * g_
            if training:
                dx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                dx = dxhat * inv
        return dx, dgamma, dbeta

    return Tensor.from_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)
