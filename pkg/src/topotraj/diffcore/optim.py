"""Parameters, Adam and gradient clipping."""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .array import DiffArray, StateError, default_dtype


class Parameter(DiffArray):
    """A trainable leaf array carrying its own Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def adam_step(params: Iterable[Parameter], lr: float = 0.003, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * (g * g)
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        if lr != 0.0:
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: Iterable[Parameter], max_norm: Optional[float]) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = list(params)
    norm = grad_norm(params)
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
