"""Neural-net building blocks on top of the autodiff tensor."""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError
from .tensor import Tensor, matmul, relu  # noqa: F401  (relu re-exported)


def linear(t: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``t @ weight + bias`` where leading dims of ``t`` are batch-like."""
    if t.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input dim {t.shape} incompatible with weight {weight.shape}")
    out = matmul(t, weight)
    if bias is not None:
        out = out + bias
    return out


def softmax_lastdim(t: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked entries get exactly zero weight.

    ``mask`` is a constant 0/1 array broadcastable to ``t`` (1 = valid).
    """
    z = t.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    denom[denom == 0.0] = 1.0
    p = (e / denom).astype(t.dtype)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True, dtype=np.float64).astype(t.dtype)
        return (p * (g - inner),)

    return Tensor._result(p, (t,), backward, "softmax")


def dropout(t: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return t
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(t.shape) >= p).astype(t.dtype) / np.asarray(1.0 - p, dtype=t.dtype)

    def backward(g):
        return (g * keep,)

    return Tensor._result(t.data * keep, (t,), backward, "dropout")


def masked_mse(pred: Tensor, target, cell_mask) -> Tensor:
    """Mean squared error over cells where ``cell_mask`` is 1.

    ``target`` and ``cell_mask`` are constants; masked-out cells
    contribute exactly zero to the value and the gradient.
    """
    mask = np.asarray(cell_mask, dtype=pred.dtype)
    mask = np.broadcast_to(mask, pred.shape) if mask.shape != pred.shape else mask
    n = float(mask.sum())
    if n == 0:
        raise ContractError("masked_mse: mask selects no cells")
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    sq = diff * diff
    return (sq * Tensor(mask)).sum() * (1.0 / n)
