"""Differentiable neural-network primitives built on :class:`odimo.tensor.Tensor`."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, as_tensor, stack


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of (N, C_in, H, W) input with (C_out, C_in/groups, f_y, f_x) filters."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_per_group, fy, fx = weight.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_per_group * groups != c_in:
        raise ShapeError(f"C_in mismatch: input has {c_in} channels, weight expects {c_per_group * groups}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape (C_out,)=({c_out},), got {bias.shape}")
    oy = conv_output_size(h, fy, stride, padding)
    ox = conv_output_size(w, fx, stride, padding)
    if oy < 1 or ox < 1:
        raise ShapeError(f"kernel {fy}x{fx} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = _pad(x.data, padding)
    hp, wp = xp.shape[2:]
    cols = _kernels.im2col(xp, fy, fx, stride)
    k = c_per_group * fy * fx
    cols_g = cols.reshape(n, groups, k, oy * ox)
    w_g = weight.data.reshape(groups, c_out // groups, k)
    out = np.matmul(w_g[None], cols_g).reshape(n, c_out, oy, ox)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g_g = g.reshape(n, groups, c_out // groups, oy * ox)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w_g.transpose(0, 2, 1)[None], g_g).reshape(n, c_in, fy, fx, oy, ox)
            gx = _kernels.col2im(np.ascontiguousarray(dcols), hp, wp, stride)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out.astype(x.dtype, copy=False), parents, back, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for (N, F_in) inputs and (F_out, F_in) weights."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"F_in mismatch: input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias must have shape (F_out,)=({weight.shape[0]},), got {bias.shape}")
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    return x.relu()


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual add needs equal shapes, got {a.shape} and {b.shape}")
    return a + b


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    xp = _pad(x.data, padding, value=-np.inf)
    hp, wp = xp.shape[2:]
    cols = _kernels.im2col(xp, kernel, kernel, stride)
    oy, ox = cols.shape[4:]
    flat = cols.reshape(n, c, kernel * kernel, oy, ox)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def back(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[:, :, None], g[:, :, None], axis=2)
        gx = _kernels.col2im(dflat.reshape(cols.shape), hp, wp, stride)
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        return (gx,)

    return Tensor._make(out, (x,), back, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), back, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, K) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    n = logits.shape[0]
    a = logits.data
    shifted = a - a.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        grad = exp / denom
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=a.dtype), (logits,), back, "cross_entropy")


def softmax_temp(x: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax ``exp(x_i/tau) / sum_j exp(x_j/tau)`` along ``axis``.

    Entries equal to ``-inf`` get probability 0 and receive zero gradient, so
    masked choices stay masked.
    """
    if not tau > 0:
        raise ValueError(f"softmax temperature must be > 0, got {tau}")
    z = x.data / tau
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return Tensor._make(out, (x,), back, "softmax_temp")


def smooth_max(values: Sequence[Tensor] | Tensor, beta: float) -> Tensor:
    """Log-sum-exp relaxation ``beta * log(sum_i exp(v_i / beta))`` of ``max(v)``.

    Bounded by ``max(v) <= out <= max(v) + beta * ln(n)``.
    """
    if not beta > 0:
        raise ValueError(f"smooth_max needs beta > 0, got {beta}")
    if isinstance(values, Tensor):
        v = values.reshape(-1)
    else:
        if len(values) == 0:
            raise ValueError("smooth_max of an empty list")
        v = stack([as_tensor(t).reshape(()) for t in values])
    a = v.data.astype(np.float64)
    m = a.max()
    e = np.exp((a - m) / beta)
    s = e.sum()
    out = m + beta * np.log(s)
    weights = e / s

    def back(g):
        return (g * weights,)

    return Tensor._make(np.asarray(out, dtype=v.dtype), (v,), back, "smooth_max")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of an (N, C, H, W) or (N, C) input.

    In training mode the running statistics arrays are updated in place.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    a = x.data
    if training:
        mean = a.mean(axis=axes)
        var = a.var(axis=axes)
        count = a.size // a.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a - mean.reshape(shape)) * inv_std.reshape(shape)
    out = (gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)).astype(a.dtype, copy=False)

    def back(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gs = g * gamma.data.reshape(shape)
        if training:
            m = a.size // a.shape[1]
            gx = (inv_std.reshape(shape) / m) * (
                m * gs - gs.sum(axis=axes).reshape(shape) - xhat * (gs * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            gx = gs * inv_std.reshape(shape)
        return gx, g_gamma, g_beta

    return Tensor._make(out, (x, gamma, beta), back, "batch_norm")
