"""The fixed operator catalogue with forward and backward rules.

Image tensors are NCHW. All ops accept float32 or float64 data and keep the
input dtype, which is how the float64 shadow mode for gradient checks works.
"""

from __future__ import annotations

import numpy as np

from subseg import _kernels

from .tensor import ShapeError, Tensor, make_result

CATALOGUE = (
    "conv2d", "relu", "max_pool2d", "upsample2", "concat", "batch_norm",
    "softmax", "log_softmax", "add", "sub", "mul", "div", "scale", "log",
    "crop", "sum", "mean", "stop_gradient",
)


def forward_op_catalogue() -> tuple[str, ...]:
    """Names of the differentiable ops this module provides."""
    return CATALOGUE


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Constants take the dtype of the tensor operand."""
    if isinstance(a, Tensor):
        return a, _t(b, a)
    return _t(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def log(x: Tensor) -> Tensor:
    # a non-positive input is reported by the finiteness check in make_result
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_result(out, (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def stop_gradient(x: Tensor) -> Tensor:
    """Identity whose output is a fresh leaf: nothing flows back into ``x``."""
    return Tensor(x.data)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------- channel ops

def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ outside axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def crop(x: Tensor, index) -> Tensor:
    """Basic slicing (``x[index]``); used for spatial crops and batch halves."""
    if not isinstance(index, tuple):
        index = (index,)
    for s in index:
        if not isinstance(s, slice) or (s.step not in (None, 1)):
            raise ShapeError(f"crop: only unit-step slices are supported, got {index!r} for shape {x.shape}")
    out = x.data[index]
    if out.size == 0:
        raise ShapeError(f"crop: window {index!r} is empty for shape {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "crop")


# ---------------------------------------------------------------- spatial ops

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution (cross-correlation) with size-preserving zero padding.

    ``x`` is (N, C, H, W); ``w`` is (O, C, k, k) with k in {1, 3}; ``b`` is (O,).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] not in (1, 3):
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel shape {w.shape}")
    N, C, H, W = x.shape
    O, k = w.shape[0], w.shape[2]
    xd = np.ascontiguousarray(x.data)
    w2 = w.data.reshape(O, C * k * k)

    if k == 3:
        cols = np.empty((C * 9, N * H * W), dtype=xd.dtype)
        _kernels.im2col3(xd, cols)
        out = np.ascontiguousarray((w2 @ cols).reshape(O, N, H, W).transpose(1, 0, 2, 3))
    else:
        cols = None
        out = np.matmul(w2, xd.reshape(N, C, H * W)).reshape(N, O, H, W)
    if b is not None:
        out += b.data.reshape(1, O, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if k == 3:
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, N * H * W)
            if w.requires_grad:
                gw = (g2 @ cols.T).reshape(w.shape)
            if x.requires_grad:
                gx = np.empty_like(xd)
                _kernels.col2im3(w2.T @ g2, gx)
        else:
            g3 = g.reshape(N, O, H * W)
            if w.requires_grad:
                gw = np.matmul(g3, xd.reshape(N, C, H * W).transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if x.requires_grad:
                gx = np.matmul(w2.T, g3).reshape(x.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first tap in row-major order."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool2d: needs NCHW input with even H and W, got {x.shape}")
    N, C, H, W = x.shape
    xd = np.ascontiguousarray(x.data)
    out = np.empty((N, C, H // 2, W // 2), dtype=xd.dtype)
    arg = np.empty(out.shape, dtype=np.int8)
    _kernels.maxpool2_forward(xd, out, arg)

    def bw(g):
        gx = np.empty_like(xd)
        _kernels.maxpool2_backward(np.ascontiguousarray(g), arg, gx)
        return (gx,)

    return make_result(out, (x,), bw, "max_pool2d")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2: needs NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        gx = np.empty(x.shape, dtype=g.dtype)
        _kernels.upsample2_backward(np.ascontiguousarray(g), gx)
        return (gx,)

    return make_result(out, (x,), bw, "upsample2")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (N, H, W).

    In training mode the batch statistics normalize and the running buffers are
    updated in place (unbiased variance); otherwise the running buffers are used.
    """
    C = x.shape[1]
    if x.ndim != 4 or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: input shape {x.shape} incompatible with affine shapes "
                         f"{gamma.shape} and {beta.shape}")
    xd = x.data
    g4 = gamma.data.reshape(1, C, 1, 1)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C).astype(running_mean.dtype)
        unbiased = var.reshape(C) * (m / max(m - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, C, 1, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, C, 1, 1)) * inv_std
    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            if training:
                gx = inv_std * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "batch_norm")
