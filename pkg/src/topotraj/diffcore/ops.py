"""Differentiable operations.

Each op computes its forward value with numpy and, when any input takes part
in differentiation, attaches a closure that maps the output gradient to input
gradients. Composite ops (residual block, attention) are built from the
primitive ones so their gradients come for free.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .. import kernels
from .array import ConfigError, DiffArray, ShapeError, as_array, needs_grad


def _make(data, parents: Sequence[DiffArray], backward, name: str) -> DiffArray:
    if needs_grad(*parents):
        return DiffArray(data, parents=parents, backward=backward, name=name)
    return DiffArray(data, name=name)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _grad_to(a: DiffArray, g: np.ndarray) -> None:
    if a.requires_grad or a._parents:
        a.accumulate(g)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> DiffArray:
    """Elementwise sum; ``b`` may be a bias broadcast against ``a``."""
    a, b = as_array(a), as_array(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    if out.shape != a.shape and out.shape != b.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _grad_to(a, _unbroadcast(g, a.shape))
        _grad_to(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> DiffArray:
    return add(a, scale(as_array(b), -1.0))


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        _grad_to(a, g * b.data)
        _grad_to(b, g * a.data)

    return _make(out, (a, b), backward, "mul")


def scale(a: DiffArray, c: float) -> DiffArray:
    out = a.data * a.data.dtype.type(c)

    def backward(g):
        _grad_to(a, g * a.data.dtype.type(c))

    return _make(out, (a,), backward, "scale")


def relu(a: DiffArray) -> DiffArray:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.data.dtype, copy=False)

    def backward(g):
        _grad_to(a, g * mask)

    return _make(out, (a,), backward, "relu")


def sigmoid(a: DiffArray) -> DiffArray:
    x = a.data
    # stable for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        _grad_to(a, g * out * (1 - out))

    return _make(out, (a,), backward, "sigmoid")


# -------------------------------------------------------------------- shaping


def reshape(a: DiffArray, shape) -> DiffArray:
    out = a.data.reshape(shape)

    def backward(g):
        _grad_to(a, g.reshape(a.shape))

    return _make(out, (a,), backward, "reshape")


def transpose(a: DiffArray, axes) -> DiffArray:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        _grad_to(a, g.transpose(inv))

    return _make(out, (a,), backward, "transpose")


def sum_all(a: DiffArray) -> DiffArray:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def backward(g):
        _grad_to(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return _make(out, (a,), backward, "sum")


def mean_all(a: DiffArray) -> DiffArray:
    return scale(sum_all(a), 1.0 / a.data.size)


# --------------------------------------------------------------------- linear


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Batched matrix product over the last two axes (no batch broadcasting
    except a 2-d right operand)."""
    a, b = as_array(a), as_array(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            _grad_to(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            _grad_to(b, gb)

    return _make(out, (a, b), backward, "matmul")


def linear(x: DiffArray, weight: DiffArray, bias: Optional[DiffArray] = None) -> DiffArray:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        _grad_to(x, (g2 @ weight.data.T).reshape(x.shape))
        _grad_to(weight, x2.T @ g2)
        if bias is not None:
            _grad_to(bias, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


# ------------------------------------------------------------- normalization


def layer_norm(x: DiffArray, gamma: DiffArray, beta: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Normalize over the last axis (no batch statistics)."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        _grad_to(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        _grad_to(beta, g.reshape(-1, d).sum(axis=0))
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _grad_to(x, dx)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def _softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: DiffArray) -> DiffArray:
    """Softmax over the last axis."""
    out = _softmax_last(x.data)

    def backward(g):
        _grad_to(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), backward, "softmax")


def spatial_softmax(x: DiffArray) -> DiffArray:
    """Per-channel softmax over the H x W cells of a (B, C, H, W) array."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_softmax expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    flat = reshape(x, (B, C, H * W))
    return reshape(softmax(flat), (B, C, H, W))


# -------------------------------------------------------------- convolutions


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: DiffArray, weight: DiffArray, bias: Optional[DiffArray] = None,
           stride: int = 1, padding: int = 0) -> DiffArray:
    """Cross-correlation of (B, C, H, W) input with a (C', C, k, k) kernel."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d: stride must be 1 or 2, got {stride}")
    B, C, H, W = x.shape
    Co, _, k, _ = weight.shape
    Ho, Wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    xd = np.ascontiguousarray(x.data)
    cols = kernels.im2col(xd, k, stride, padding)  # (B, C*k*k, L)
    w2 = weight.data.reshape(Co, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, Co, Ho, Wo)

    def backward(g):
        g3 = g.reshape(B, Co, Ho * Wo)
        if weight.requires_grad or weight._parents:
            gw = np.zeros_like(w2)
            for b in range(B):
                gw += g3[b] @ cols[b].T
            _grad_to(weight, gw.reshape(weight.shape))
        if bias is not None:
            _grad_to(bias, g3.sum(axis=(0, 2)))
        if x.requires_grad or x._parents:
            gcols = np.matmul(w2.T, g3)
            _grad_to(x, kernels.col2im(gcols, x.shape, k, stride, padding))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: DiffArray, weight: DiffArray, bias: Optional[DiffArray] = None,
                     stride: int = 1, padding: int = 0) -> DiffArray:
    """Per-channel convolution; kernel is (C, 1, k, k)."""
    if x.ndim != 4 or weight.shape[0] != x.shape[1] or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    B, C, H, W = x.shape
    k = weight.shape[2]
    Ho, Wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)
    cols = kernels.im2col(np.ascontiguousarray(x.data), k, stride, padding).reshape(B, C, k * k, Ho * Wo)
    w2 = weight.data.reshape(C, k * k)
    out = np.einsum("bckl,ck->bcl", cols, w2)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, C, Ho, Wo)

    def backward(g):
        g3 = g.reshape(B, C, Ho * Wo)
        _grad_to(weight, np.einsum("bckl,bcl->ck", cols, g3).reshape(weight.shape))
        if bias is not None:
            _grad_to(bias, g3.sum(axis=(0, 2)))
        if x.requires_grad or x._parents:
            gcols = (w2[None, :, :, None] * g3[:, :, None, :]).reshape(B, C * k * k, Ho * Wo)
            _grad_to(x, kernels.col2im(np.ascontiguousarray(gcols), x.shape, k, stride, padding))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "depthwise_conv2d")


def upsample2x(x: DiffArray) -> DiffArray:
    """Nearest-neighbour 2x upsampling of a (B, C, H, W) array."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        _grad_to(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make(out, (x,), backward, "upsample2x")


def crop(x: DiffArray, height: int, width: int) -> DiffArray:
    """Keep the top-left ``height`` x ``width`` window of a (B, C, H, W) array."""
    B, C, H, W = x.shape
    if height > H or width > W:
        raise ShapeError(f"crop: {height}x{width} larger than input {H}x{W}")
    if (height, width) == (H, W):
        return x
    out = x.data[:, :, :height, :width].copy()

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :height, :width] = g
        _grad_to(x, full)

    return _make(out, (x,), backward, "crop")


def residual_block(x: DiffArray, w1, b1, w2, b2, stride: int = 1, proj_w=None, proj_b=None) -> DiffArray:
    """relu(conv3x3(relu(conv3x3_s(x))) + skip(x)); ``skip`` is a strided 1x1
    projection when the shape changes, identity otherwise."""
    h = relu(conv2d(x, w1, b1, stride=stride, padding=1))
    h = conv2d(h, w2, b2, stride=1, padding=1)
    if proj_w is not None:
        skip = conv2d(x, proj_w, proj_b, stride=stride, padding=0)
    else:
        if stride != 1 or x.shape[1] != w2.shape[0]:
            raise ShapeError(f"residual_block: identity skip impossible for input {x.shape} -> {h.shape}")
        skip = x
    return relu(add(h, skip))


# ------------------------------------------------------------------ attention


def multi_head_attention(query: DiffArray, key_value: DiffArray, wq, bq, wk, bk, wv, bv, wo, bo,
                         heads: int) -> DiffArray:
    """softmax(Q K^T / sqrt(d/h)) V per head, heads concatenated then projected.

    ``query`` is (B, Nq, d); ``key_value`` is (B, Nk, d).
    """
    B, Nq, d = query.shape
    Nk = key_value.shape[1]
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    q = linear(query, wq, bq)
    k = linear(key_value, wk, bk)
    v = linear(key_value, wv, bv)

    def split(t, n):
        return reshape(transpose(reshape(t, (B, n, heads, dh)), (0, 2, 1, 3)), (B * heads, n, dh))

    qh, kh, vh = split(q, Nq), split(k, Nk), split(v, Nk)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    att = softmax(scores)
    ctx = matmul(att, vh)  # (B*h, Nq, dh)
    ctx = reshape(transpose(reshape(ctx, (B, heads, Nq, dh)), (0, 2, 1, 3)), (B, Nq, d))
    return linear(ctx, wo, bo)


# --------------------------------------------------------------------- losses


def mse_loss(pred: DiffArray, target, reduction: str = "mean") -> DiffArray:
    target = target.data if isinstance(target, DiffArray) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    total = np.sum(diff.astype(np.float64) ** 2)
    n = diff.size if reduction == "mean" else 1
    out = np.asarray(total / n, dtype=pred.dtype)

    def backward(g):
        _grad_to(pred, (2.0 / n) * g * diff)

    return _make(out, (pred,), backward, "mse_loss")


BCE_EPS = 1e-7


def bce_loss(prob: DiffArray, target, reduction: str = "mean") -> DiffArray:
    """Binary cross-entropy of probabilities clamped to [eps, 1 - eps]."""
    target = target.data if isinstance(target, DiffArray) else np.asarray(target, dtype=prob.dtype)
    if prob.shape != target.shape:
        raise ShapeError(f"bce_loss: prediction {prob.shape} vs target {target.shape}")
    p64 = prob.data.astype(np.float64)
    p = np.clip(p64, BCE_EPS, 1 - BCE_EPS)
    t = target.astype(np.float64)
    total = -np.sum(t * np.log(p) + (1 - t) * np.log(1 - p))
    n = p.size if reduction == "mean" else 1
    out = np.asarray(total / n, dtype=prob.dtype)
    inside = (p64 > BCE_EPS) & (p64 < 1 - BCE_EPS)

    def backward(g):
        grad = (p - t) / (p * (1 - p)) * inside / n
        _grad_to(prob, (g * grad).astype(prob.dtype))

    return _make(out, (prob,), backward, "bce_loss")
