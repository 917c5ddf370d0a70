"""Differentiable ops on :class:`~dagan.diffgraph.tensor.Tensor`.

Image tensors are laid out ``(batch, channels, height, width)``. Each op
computes its forward value eagerly and registers a closure that maps the
output gradient to input gradients.
"""

from __future__ import annotations

from numbers import Number
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result

Scalar = Union[int, float]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        return make_result(a.data + b, (a,), lambda g: (g,), "add")
    if isinstance(a, Number):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        return add(a, -b)
    if isinstance(a, Number):
        b = as_tensor(b)
        return make_result(a - b.data, (b,), lambda g: (-g,), "sub")
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def scalar_mul(a, c: Scalar) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    if isinstance(b, Number):
        return scalar_mul(a, b)
    if isinstance(a, Number):
        return scalar_mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result(a.data * b.data, (a, b), back, "mul")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_result(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def back(g):
        gy = g * y
        s = gy.sum(axis=axis, keepdims=True)
        gy -= y * s
        return (gy,)

    return make_result(y, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (a,), back, "log_softmax")


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; 1-D operands follow numpy's promotion rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", "operands must be at least 1-D")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    a_vec, b_vec = a.ndim == 1, b.ndim == 1

    def back(g):
        A = a.data[None, :] if a_vec else a.data
        B = b.data[:, None] if b_vec else b.data
        G = g
        if a_vec:
            G = np.expand_dims(G, -2)
        if b_vec:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            ga = _unbroadcast(ga, A.shape)
            ga = ga.reshape(a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            gb = _unbroadcast(gb, B.shape)
            gb = gb.reshape(b.shape)
        return ga, gb

    return make_result(out, (a, b), back, "matmul")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % max(a.ndim, 1) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} are not a permutation for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    """Basic (slice) indexing."""
    a = as_tensor(a)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_result(out, (a,), back, "getitem")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default, for skip connections)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "nothing to concatenate")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", f"shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in ts], axis=ax), ts, back, "concat")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), back, "reduce_sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), back, "reduce_mean")


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view ``(B, C, Ho, Wo, kh, kw)`` of the padded input ``xp``."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _fold(cols: np.ndarray, out_hw: Tuple[int, int], stride: int) -> np.ndarray:
    """Scatter-add patches ``(B, C, Ho, Wo, kh, kw)`` into ``(B, C, H, W)``."""
    B, C, Ho, Wo, kh, kw = cols.shape
    out = np.zeros((B, C) + tuple(out_hw), dtype=cols.dtype)
    taps = np.ascontiguousarray(np.moveaxis(cols, (4, 5), (0, 1)))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += taps[i, j]
    return out


def _check_image(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(op, f"expected a (batch, channels, height, width) tensor, got shape {x.shape}")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight ``(out, in, kh, kw)`` and zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    _check_image("conv2d", x)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", f"weight {w.shape} incompatible with input channels {x.shape[1]}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    p = padding
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _patches(xp, kh, kw, stride)
    Ho, Wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError("conv2d", f"bias shape {b.shape} != ({O},)")
        out += b.data[None, :, None, None]
        parents = (x, w, b)

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
            gxp = _fold(gcols.transpose(0, 3, 1, 2, 4, 5), (Hp, Wp), stride)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            # Rows/cols never touched by a window (stride overhang) get zero.
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, back, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution (the adjoint of :func:`conv2d`).

    ``w`` has shape ``(in, out, kh, kw)``; the output side is
    ``(H - 1) * stride - 2 * padding + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_image("conv_transpose2d", x)
    if w.ndim != 4 or w.shape[0] != x.shape[1]:
        raise ShapeError("conv_transpose2d", f"weight {w.shape} incompatible with input channels {x.shape[1]}")
    B, C, H, W = x.shape
    _, O, kh, kw = w.shape
    p = padding
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    Ho, Wo = Hf - 2 * p, Wf - 2 * p
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv_transpose2d", f"padding {p} leaves an empty output")
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # B, H, W, O, kh, kw
    full = _fold(cols.transpose(0, 3, 1, 2, 4, 5), (Hf, Wf), stride)
    out = np.ascontiguousarray(full[:, :, p:p + Ho, p:p + Wo])
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError("conv_transpose2d", f"bias shape {b.shape} != ({O},)")
        out += b.data[None, :, None, None]
        parents = (x, w, b)

    def back(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        win = _patches(gfull, kh, kw, stride)  # B, O, H, W, kh, kw
        gx = gw = None
        if x.requires_grad:
            gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # B, H, W, C
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))  # C, O, kh, kw
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, back, "conv_transpose2d")


def conv1x1(x, w, b=None) -> Tensor:
    """Pointwise convolution with weight ``(out, in)``; a channel-mixing matmul."""
    x, w = as_tensor(x), as_tensor(w)
    _check_image("conv1x1", x)
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError("conv1x1", f"weight {w.shape} incompatible with input channels {x.shape[1]}")
    B, C, H, W = x.shape
    O = w.shape[0]
    flat = x.data.reshape(B, C, H * W)
    out = np.matmul(w.data, flat).reshape(B, O, H, W)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError("conv1x1", f"bias shape {b.shape} != ({O},)")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def back(g):
        gf = g.reshape(B, O, H * W)
        gx = np.matmul(w.data.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(gf, flat.transpose(0, 2, 1)).sum(axis=0) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, back, "conv1x1")


# ---------------------------------------------------------------------------
# Resampling and normalisation
# ---------------------------------------------------------------------------

def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    _check_image("upsample_nearest", x)
    f = int(factor)
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    B, C, H, W = x.shape

    def back(g):
        return (g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)),)

    return make_result(out, (x,), back, "upsample_nearest")


def avg_pool2d(x, factor: int = 2) -> Tensor:
    """Non-overlapping mean pooling by an integer factor."""
    x = as_tensor(x)
    _check_image("avg_pool2d", x)
    f = int(factor)
    B, C, H, W = x.shape
    if H % f or W % f:
        raise ShapeError("avg_pool2d", f"spatial size {H}x{W} not divisible by {f}")
    out = x.data.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))

    def back(g):
        return ((g / (f * f)).repeat(f, axis=2).repeat(f, axis=3),)

    return make_result(out.astype(x.dtype), (x,), back, "avg_pool2d")


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane to zero mean and unit variance."""
    x = as_tensor(x)
    _check_image("instance_norm", x)
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)

    def back(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_result(xhat, (x,), back, "instance_norm")
