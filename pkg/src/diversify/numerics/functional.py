"""Differentiable layer primitives on :class:`Tensor`.

Spatial tensors use the (batch, channels, 1, length) layout so that the
(1, k) convolution and (1, 2) pooling kernels act along the time axis.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, NumericError, ShapeError
from .tensor import Tensor, as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear expects (batch, {weight.shape[0]}), got {x.shape}")
    out = x @ weight
    return out if bias is None else out + bias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid (no padding, stride 1) convolution with a (1, k) kernel.

    ``x`` is (B, C_in, 1, L) and ``weight`` is (C_out, C_in, 1, k); the
    output is (B, C_out, 1, L - k + 1).
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] != 1:
        raise ShapeError(f"conv2d expects (batch, channels, 1, length), got {x.shape}")
    c_out, c_in, kh, k = weight.shape
    if kh != 1 or x.shape[1] != c_in:
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    b, _, _, length = x.shape
    if length < k:
        raise ShapeError(f"input length {length} shorter than kernel width {k}")
    l_out = length - k + 1

    windows = sliding_window_view(x.data[:, :, 0, :], k, axis=-1)  # (B, C_in, L_out, k)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(b * l_out, c_in * k)
    w_mat = weight.data.reshape(c_out, c_in * k)
    out = (cols @ w_mat.T).reshape(b, l_out, c_out).transpose(0, 2, 1)[:, :, None, :]
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g[:, :, 0, :].transpose(0, 2, 1).reshape(b * l_out, c_out)
        dw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ w_mat).reshape(b, l_out, c_in, k)
        dx = np.zeros((b, c_in, length), dtype=x.dtype)
        for j in range(k):
            dx[:, :, j:j + l_out] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dx[:, :, None, :], dw

    y = make_node(out, (x, weight), back)
    if bias is not None:
        y = y + bias.reshape((1, c_out, 1, 1))
    return y


def max_pool(x: Tensor, width: int = 2) -> Tensor:
    """Max pooling with a (1, width) kernel and stride ``width``; the ragged tail is dropped."""
    x = as_tensor(x)
    b, c, h, length = x.shape
    l_out = length // width
    if l_out < 1:
        raise ShapeError(f"input length {length} shorter than pool width {width}")
    blocks = x.data[..., : l_out * width].reshape(b, c, h, l_out, width)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        dblocks = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(dblocks, idx[..., None], g[..., None], axis=-1)
        dx = np.zeros(x.shape, dtype=x.dtype)
        dx[..., : l_out * width] = dblocks.reshape(b, c, h, l_out * width)
        return (dx,)

    return make_node(out, (x,), back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation over (batch, height, width).

    In training mode the running statistics are updated in place (unbiased
    variance, as in the common deep learning frameworks).
    """
    x = as_tensor(x)
    axes = (0, 2, 3)
    shape = (1, x.shape[1], 1, 1)
    g_ = gamma.data.reshape(shape)

    if training:
        if x.shape[0] < 2:
            raise DataError("batch norm in training mode needs a batch of at least 2")
        n = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * n / (n - 1)

        def back(g):
            dxhat = g * g_
            dx = inv_std / n * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv_std

        def back(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g_ + beta.data.reshape(shape)
    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def reverse_gradient(x: Tensor, lam: float) -> Tensor:
    """Identity on the forward pass; the backward pass emits ``-lam * grad``."""
    if lam < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")
    x = as_tensor(x)
    scale = np.asarray(-lam, dtype=x.dtype)
    return make_node(x.data.copy(), (x,), lambda g: (g * scale,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    b, c = logits.shape
    if b < 1 or targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {b}")
    if targets.dtype.kind not in "iu" or targets.min() < 0 or targets.max() >= c:
        raise DataError(f"targets must be integers in [0, {c})")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits in cross_entropy")

    logp = log_softmax(logits.data)
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def back(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / b),)

    return make_node(loss, (logits,), back)
