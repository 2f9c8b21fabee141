"""Differentiable layer primitives on NCHW arrays.

Each op computes its forward on ``Tensor.data`` and registers a closure
returning one gradient per parent (``None`` where a parent needs none).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, _needs_grad, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _im2col3x3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects NCHW input and Kx C x3x3 weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    k = wd.shape[0]
    if wd.shape[1] != c or bd.shape != (k,):
        raise ValueError(f"conv2d shape mismatch: input {xd.shape}, weight {wd.shape}, bias {bd.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3x3(xp, h, w)
    wmat = wd.reshape(k, c * 9)
    out = cols @ wmat.T
    out += bd
    out = out.reshape(n, h, w, k).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, k)
        gw = (gmat.T @ cols).reshape(wd.shape) if _needs_grad(weight) else None
        gb = gmat.sum(axis=0) if _needs_grad(bias) else None
        gx = None
        if _needs_grad(x):
            dcols = (gmat @ wmat).reshape(n, h, w, c, 3, 3)
            gxp = np.zeros((n, h + 2, w + 2, c), dtype=xd.dtype)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
            gx = gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    xd, wd, bd = x.data, weight.data, bias.data
    n, c, h, w = xd.shape
    if wd.shape[1:] != (c, 1, 1):
        raise ValueError(f"1x1 head expects weight (K, {c}, 1, 1), got {wd.shape}")
    k = wd.shape[0]
    wmat = wd.reshape(k, c)
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    out = (xm @ wmat.T + bd).reshape(n, h, w, k).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gx = (gm @ wmat).reshape(n, h, w, c).transpose(0, 3, 1, 2) if _needs_grad(x) else None
        gw = (gm.T @ xm).reshape(wd.shape) if _needs_grad(weight) else None
        gb = gm.sum(axis=0) if _needs_grad(bias) else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv1x1")


def conv_transpose2x2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel; weight is (C_in, C_out, 2, 2)."""
    xd, wd, bd = x.data, weight.data, bias.data
    n, c, h, w = xd.shape
    if wd.shape[0] != c or wd.shape[2:] != (2, 2):
        raise ValueError(f"transposed conv shape mismatch: input {xd.shape}, weight {wd.shape}")
    o = wd.shape[1]
    xm = xd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    wm = wd.reshape(c, o * 4)
    y = (xm @ wm).reshape(n, h, w, o, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * w) + bd[None, :, None, None]

    def backward(g: np.ndarray):
        gm = g.reshape(n, o, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, o * 4)
        gx = (gm @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if _needs_grad(x) else None
        gw = (xm.T @ gm).reshape(wd.shape) if _needs_grad(weight) else None
        gb = g.sum(axis=(0, 2, 3)) if _needs_grad(bias) else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv_transpose2x2")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the running buffers are updated in place (unbiased
    variance, as is conventional); in eval mode they are read only.
    """
    xd = x.data
    n, c, h, w = xd.shape
    m = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if m < 2:
            raise ValueError("batchnorm in training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(shape)) * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g: np.ndarray):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if _needs_grad(gamma) else None
        gbeta = g.sum(axis=(0, 2, 3)) if _needs_grad(beta) else None
        gx = None
        if _needs_grad(x):
            dxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                gx = (invstd.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd.reshape(shape)
        return gx, gg, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling; ties route the gradient to the first element in row-major order."""
    xd = x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2x2")


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis (skip connections)."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat operands disagree on N,H,W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError("add requires equal shapes")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError("mul requires equal shapes")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    return make_result(a.data * k, (a,), lambda g: (g * k,), "scale")


def total(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_result(
        np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),), "sum"
    )
