"""Differentiable primitives used by the hypernetwork and the main network.

Convolutions are plain cross-correlations built on an explicit im2col buffer,
laid out as ``[C*kh*kw, B*H'*W']`` per group so that each forward or backward
product is a single GEMM.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def _out_extent(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    effective = (kernel - 1) * dilation + 1
    return (size + 2 * padding - effective) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D [C_out,C_in/groups,kH,kW], got {weight.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"input channels C_in={C} not divisible by groups={groups}")
    if O % groups:
        raise ShapeError(f"output channels C_out={O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"weight dimension 1 (C_in/groups) is {Cg}, expected {C // groups}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ShapeError("dilation and stride must be >= 1, padding >= 0")
    if (kh - 1) * dilation + 1 > H + 2 * padding:
        raise ShapeError(f"effective kernel height {(kh - 1) * dilation + 1} exceeds padded input height {H + 2 * padding}")
    if (kw - 1) * dilation + 1 > W + 2 * padding:
        raise ShapeError(f"effective kernel width {(kw - 1) * dilation + 1} exceeds padded input width {W + 2 * padding}")

    Ho = _out_extent(H, kh, stride, dilation, padding)
    Wo = _out_extent(W, kw, stride, dilation, padding)
    g, Og = groups, O // groups
    K = Cg * kh * kw
    P = B * Ho * Wo
    wm = weight.data.reshape(g, Og, K)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.transpose(1, 0, 2, 3).reshape(g, K, P)
        out = np.matmul(wm, cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

        def backward(grad):
            go = grad.transpose(1, 0, 2, 3).reshape(g, Og, P)
            dw = np.matmul(go, cols.transpose(0, 2, 1)).reshape(weight.shape)
            dx = np.matmul(wm.transpose(0, 2, 1), go).reshape(C, B, H, W).transpose(1, 0, 2, 3)
            return np.ascontiguousarray(dx), dw

        return Tensor._from_op(np.ascontiguousarray(out), (x, weight), backward)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xt = xp.transpose(1, 0, 2, 3)
    hi_span = stride * (Ho - 1) + 1
    wi_span = stride * (Wo - 1) + 1
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, i, j] = xt[:, :, r0:r0 + hi_span:stride, c0:c0 + wi_span:stride]
    cols = cols.reshape(g, K, P)
    out = np.matmul(wm, cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(grad):
        go = grad.transpose(1, 0, 2, 3).reshape(g, Og, P)
        dw = np.matmul(go, cols.transpose(0, 2, 1)).reshape(weight.shape)
        dcols = np.matmul(wm.transpose(0, 2, 1), go).reshape(C, kh, kw, B, Ho, Wo)
        dxt = np.zeros((C, B) + xp.shape[2:], dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                dxt[:, :, r0:r0 + hi_span:stride, c0:c0 + wi_span:stride] += dcols[:, i, j]
        dx = dxt.transpose(1, 0, 2, 3)
        if padding:
            dx = dx[:, :, padding:padding + H, padding:padding + W]
        return np.ascontiguousarray(dx), dw

    return Tensor._from_op(np.ascontiguousarray(out), (x, weight), backward)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if window < 1 or window > H or window > W:
        raise ShapeError(f"pooling window {window} exceeds input spatial extent {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    scale = 1.0 / (window * window)
    hi_span = stride * (Ho - 1) + 1
    wi_span = stride * (Wo - 1) + 1
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out += x.data[:, :, i:i + hi_span:stride, j:j + wi_span:stride]
    out *= scale

    def backward(grad):
        dx = np.zeros_like(x.data)
        g = grad * scale
        for i in range(window):
            for j in range(window):
                dx[:, :, i:i + hi_span:stride, j:j + wi_span:stride] += g
        return (dx,)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ShapeError("global_avg_pool needs non-empty spatial dims")
    out = x.data.mean(axis=(2, 3))

    def backward(grad):
        return (np.broadcast_to(grad[:, :, None, None] / (H * W), x.shape).astype(x.dtype),)

    return Tensor._from_op(out.astype(x.dtype), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.02) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * x.dtype.type(slope))

    def backward(grad):
        return (np.where(positive, grad, grad * grad.dtype.type(slope)),)

    return Tensor._from_op(out, (x,), backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    inputs = tuple(inputs)
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"spatial/batch mismatch in concat_channels: {t.shape} vs {ref}")
    widths = [t.shape[1] for t in inputs]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in inputs], axis=1)

    def backward(grad):
        return tuple(grad[:, bounds[k]:bounds[k + 1]] for k in range(len(inputs)))

    return Tensor._from_op(out, inputs, backward)


def accumulate(bank: Tensor, value: Tensor) -> Tensor:
    """Additive write into a memory bank."""
    if bank.shape != value.shape:
        raise ShapeError(f"bank shape {bank.shape} != written value shape {value.shape}")
    return Tensor._from_op(bank.data + value.data, (bank, value), lambda g: (g, g))


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
    """Per-channel normalization over every axis except 1.

    ``running_mean``/``running_var`` are updated in place in training mode,
    so callers may pass views into larger buffers.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm parameters must have shape ({C},), got {gamma.shape}, {beta.shape}")
    if running_mean.shape != (C,) or running_var.shape != (C,):
        raise ShapeError(f"running statistics must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    count = x.size // C

    if training:
        if count < 2:
            raise ValueError("batch_norm in train mode needs more than one value per channel (degenerate statistics)")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(grad):
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * gamma.data.reshape(bshape)
        if training:
            dx = (
                dxhat
                - dxhat.mean(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).mean(axis=axes).reshape(bshape)
            ) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out.astype(x.dtype), (x, gamma, beta), backward)


def normalize_filter(w: Tensor) -> Tensor:
    """Divide an entire filter tensor by its single Euclidean norm."""
    norm = float(np.sqrt(np.sum(w.data.astype(np.float64) ** 2)))
    denom = norm + NORM_EPS
    out = w.data / w.dtype.type(denom)

    def backward(grad):
        dw = grad / denom
        if norm > 0:
            dw = dw - w.data * (float(np.sum(grad * w.data)) / (denom * denom * norm))
        return (dw.astype(w.dtype),)

    return Tensor._from_op(out, (w,), backward)


def scale(x: Tensor, gain: Tensor) -> Tensor:
    """Multiply a tensor by a learned scalar."""
    return x * gain


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"linear input must be 2-D [B,C], got {x.shape}")
    K, C = weight.shape
    if x.shape[1] != C:
        raise ShapeError(f"linear input width {x.shape[1]} != weight input dimension {C}")
    if bias.shape != (K,):
        raise ShapeError(f"bias shape {bias.shape} != ({K},)")
    out = x.data @ weight.data.T + bias.data

    def backward(grad):
        return grad @ weight.data, grad.T @ x.data, grad.sum(axis=0)

    return Tensor._from_op(out, (x, weight, bias), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D [B,K], got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(B)
    loss = -log_probs[rows, labels].mean()

    def backward(grad):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return ((d * (grad / B)).astype(logits.dtype),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def predict(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.data, axis=1)
