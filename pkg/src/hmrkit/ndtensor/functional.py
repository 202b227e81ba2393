"""Differentiable primitives built on :class:`~hmrkit.ndtensor.tensor.Tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, DimensionError, Tensor, _unbroadcast, as_tensor


class ConfigurationError(ValueError):
    """Raised for invalid operator hyper-parameters."""


LAYER_NORM_EPS = 1e-5


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.requires_grad else None
        db = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape) if b.requires_grad else None
        return da, db

    return Tensor._make(np.matmul(A, B), (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), backward)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Disallowed entries get probability exactly 0. The max used for
    stabilisation is taken over allowed entries only, so arbitrary values in
    masked slots cannot overflow.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, scores.shape)
    except ValueError:
        raise DimensionError(f"mask shape {mask.shape} does not broadcast to scores {scores.shape}") from None
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: a mask row has no allowed entry")
    s = scores.data
    row_max = np.where(mask, s, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, s - row_max, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (scores,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params {gain.shape}/{bias.shape} do not match D={d}")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    G = gain.data

    def backward(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(a.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(xhat * G + bias.data, (x, gain, bias), backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernels`` is (C_out, C_in, k, k)
    with odd ``k``. The output size must come out integral; there is no
    silent flooring.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects (B,C,H,W) input and 4-D kernels, got {x.shape}, {kernels.shape}")
    B, C, H, W = x.shape
    C_out, C_in, k, k2 = kernels.shape
    if C_in != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d needs square odd kernels, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d stride must be >= 1 and padding >= 0")
    span_h, span_w = H + 2 * padding - k, W + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d output size not integral for H={H}, W={W}, k={k}, stride={stride}, padding={padding}"
        )
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = kernels.data.reshape(C_out, C * k * k)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, C_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, C_out)
        dk = (g2.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        return dx, dk

    result = Tensor._make(np.ascontiguousarray(out), (x, kernels), backward)
    if bias is not None:
        result = result + as_tensor(bias).reshape(1, C_out, 1, 1)
    return result.reshape(result.shape[1:]) if unbatched else result


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling over the last two axes."""
    *lead, H, W = x.shape
    if H % size or W % size:
        raise ConfigurationError(f"avg_pool2d: {H}x{W} not divisible by {size}")
    r = x.reshape(tuple(lead) + (H // size, size, W // size, size))
    n = len(lead)
    return r.mean(axis=(n + 1, n + 3))


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    *lead, H, W = x.shape
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        return (g.reshape(tuple(lead) + (H, factor, W, factor)).sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), backward)
