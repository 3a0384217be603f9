"""Dense float64 arithmetic with hand-written forward/backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order. Spatial layouts are channels-last: ``H x W x C`` for a single
image, ``N x H x W x C`` for a batch. Every layer op accepts both forms.

Each differentiable op comes as a ``*_forward`` function returning
``(output, cache)`` and a ``*_backward`` function consuming that cache.
Passing ``None`` as the cache raises :class:`StateError`.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, StateError, TrainingError

__all__ = [
    "as_tensor",
    "matmul",
    "conv2d",
    "conv2d_forward",
    "conv2d_backward",
    "im2col",
    "col2im",
    "relu",
    "relu_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "avg_pool2",
    "avg_pool2_backward",
    "bilinear_upsample",
    "bilinear_upsample_backward",
    "interp_matrix",
    "softmax",
    "sgd_step",
]


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected H x W x C or N x H x W x C, got shape {x.shape}")


def _check_kernel(kernels, cin):
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise DimensionError(f"kernels must be k x k x Cin x Cout, got {kernels.shape}")
    k = kernels.shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k}")
    if kernels.shape[2] != cin:
        raise DimensionError(f"kernel expects {kernels.shape[2]} input channels, input has {cin}")
    return k


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold a zero-padded ``N x H x W x C`` batch into ``(N*H*W) x (k*k*C)`` rows.

    Column order is (row offset, column offset, channel), matching a
    ``k x k x C x Cout`` kernel flattened in C order.
    """
    n, h, w, c = x.shape
    p = k // 2
    padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # windows: N x H x W x C x k x k
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back onto an ``N x H x W x C`` grid."""
    n, h, w, c = shape
    p = k // 2
    cols = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for di in range(k):
        for dj in range(k):
            out[:, di:di + h, dj:dj + w, :] += cols[:, :, :, di, dj, :]
    return out[:, p:p + h, p:p + w, :]


class ConvCache(NamedTuple):
    x: np.ndarray
    cols: np.ndarray | None
    kernels: np.ndarray
    squeezed: bool


def conv2d_forward(x, kernels, bias):
    """Stride-1, same-padded cross-correlation plus bias.

    Returns ``(out, cache)``. ``out`` has the spatial size of ``x``.
    """
    xb, squeezed = _batched(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    n, h, w, cin = xb.shape
    k = _check_kernel(kernels, cin)
    cout = kernels.shape[3]
    if bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    cols = xb.reshape(-1, cin) if k == 1 else im2col(xb, k)
    out = cols @ kernels.reshape(k * k * cin, cout)
    out += bias
    out = out.reshape(n, h, w, cout)
    cache = ConvCache(xb, cols, kernels, squeezed)
    return (out[0] if squeezed else out), cache


def conv2d(x, kernels, bias) -> np.ndarray:
    xb, squeezed = _batched(x)
    out, _ = conv2d_forward(xb, kernels, bias)
    return out[0] if squeezed else out


def conv2d_backward(grad_out, cache):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias.

    The input gradient is the same-padded correlation of ``grad_out`` with
    the spatially flipped kernel, channels swapped (stride 1, odd k).
    """
    if cache is None:
        raise StateError("conv2d_backward called without a forward cache")
    xb, cols, kernels, squeezed = cache
    g, _ = _batched(grad_out)
    n, h, w, cin = xb.shape
    k, cout = kernels.shape[0], kernels.shape[3]
    if g.shape != (n, h, w, cout):
        raise DimensionError(f"grad_out shape {g.shape} does not match forward output {(n, h, w, cout)}")
    g2 = g.reshape(-1, cout)
    grad_b = g2.sum(axis=0)
    grad_k = (cols.T @ g2).reshape(kernels.shape)
    flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
    gcols = g2 if k == 1 else im2col(g, k)
    grad_x = (gcols @ flipped).reshape(xb.shape)
    return (grad_x[0] if squeezed else grad_x), grad_k, grad_b


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out, cache) -> np.ndarray:
    """``cache`` is the forward input; the subgradient at exactly 0 is 0."""
    if cache is None:
        raise StateError("relu_backward called without a forward cache")
    return np.where(np.asarray(cache) > 0.0, grad_out, 0.0)


def global_avg_pool(f) -> np.ndarray:
    """Per-channel spatial mean: ``[N x] H x W x d -> [N x] d``."""
    f = np.asarray(f, dtype=np.float64)
    return f.mean(axis=(-3, -2))


def global_avg_pool_backward(grad_out, shape) -> np.ndarray:
    if shape is None:
        raise StateError("global_avg_pool_backward called without the forward shape")
    h, w = shape[-3], shape[-2]
    g = np.asarray(grad_out, dtype=np.float64) / (h * w)
    return np.broadcast_to(g[..., None, None, :], shape).copy()


def avg_pool2(x) -> np.ndarray:
    """2 x 2 non-overlapping average pooling. Spatial dims must be even."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    lead = x.shape[:-3]
    c = x.shape[-1]
    return x.reshape(*lead, h // 2, 2, w // 2, 2, c).mean(axis=(-4, -2))


def avg_pool2_backward(grad_out, shape) -> np.ndarray:
    if shape is None:
        raise StateError("avg_pool2_backward called without the forward shape")
    g = np.asarray(grad_out, dtype=np.float64) / 4.0
    g = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
    return g.reshape(shape)


def interp_matrix(src: int, dst: int) -> np.ndarray:
    """``dst x src`` align-corners linear interpolation matrix."""
    if dst < src:
        raise ConfigurationError(f"cannot upsample {src} -> {dst}")
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(f, H: int, W: int) -> np.ndarray:
    """Align-corners bilinear upsampling of ``[N x] h x w x d`` to ``[N x] H x W x d``."""
    f = np.asarray(f, dtype=np.float64)
    h, w = f.shape[-3], f.shape[-2]
    if H < h or W < w:
        raise ConfigurationError(f"target {H}x{W} smaller than source {h}x{w}")
    if (h, w) == (H, W):
        return f.copy()
    ry, rx = interp_matrix(h, H), interp_matrix(w, W)
    return np.einsum("Yy,...yxd,Xx->...YXd", ry, f, rx)


def bilinear_upsample_backward(grad_out, src_shape) -> np.ndarray:
    """Exact adjoint of :func:`bilinear_upsample` (transposed interpolation)."""
    if src_shape is None:
        raise StateError("bilinear_upsample_backward called without the source shape")
    g = np.asarray(grad_out, dtype=np.float64)
    h, w = src_shape[-3], src_shape[-2]
    H, W = g.shape[-3], g.shape[-2]
    if (h, w) == (H, W):
        return g.copy()
    ry, rx = interp_matrix(h, H), interp_matrix(w, W)
    return np.einsum("Yy,...YXd,Xx->...yxd", ry, g, rx)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sgd_step(params, grads, lr, weight_decay, momentum_state, momentum=0.9, step=None):
    """In-place SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``. ``params``, ``grads`` and
    ``momentum_state`` are dicts keyed by parameter name; missing momentum
    buffers start at zero. Returns ``params``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r}", step=step)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        v = momentum_state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g + weight_decay * p
        momentum_state[name] = v
        p -= lr * v
    return params
