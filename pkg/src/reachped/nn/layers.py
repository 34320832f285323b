"""Stateful layers: batch normalization with padding-aware statistics."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, param


class BatchNorm:
    """Batch normalization over the flattened (batch, time) positions.

    Statistics are computed per feature channel and only over positions
    where ``valid_mask`` is 1, so zero-padded rows never pollute them.
    Evaluation mode uses the running estimates and is deterministic.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps
        self.n_updates = 0

    def __call__(self, x: Tensor, training: bool, valid_mask=None, update_stats=True) -> Tensor:
        """``training`` selects batch statistics; ``update_stats`` controls
        whether the running estimates absorb them (first update copies,
        later ones blend by momentum)."""
        if x.data.ndim != 3:
            raise DimensionError(f"batchnorm expects (batch, time, channels), got {x.shape}")
        if training:
            if valid_mask is None:
                weights = np.full(x.shape[:2] + (1,), 1.0 / (x.shape[0] * x.shape[1]))
            else:
                m = np.asarray(valid_mask, dtype=np.float64)
                weights = (m / m.sum())[..., None]
            w = Tensor(weights.astype(x.dtype))
            mean = (x * w).sum(axis=(0, 1))
            centered = x - mean
            var = (centered * centered * w).sum(axis=(0, 1))
            if update_stats:
                mom = 1.0 if self.n_updates == 0 else self.momentum
                self.running_mean = (1 - mom) * self.running_mean + mom * mean.data.astype(np.float64)
                self.running_var = (1 - mom) * self.running_var + mom * var.data.astype(np.float64)
                self.n_updates += 1
            inv = (var + self.eps) ** -0.5
            return centered * inv * self.gamma + self.beta
        mean = Tensor(self.running_mean.astype(x.dtype))
        scale = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype))
        return (x - mean) * scale * self.gamma + self.beta


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)).astype(np.float32)
