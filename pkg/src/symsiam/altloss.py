"""Alternative soft-label objectives: a soft-weighted triplet loss, soft
labels from a mixture fitted on head logits, and a mix of same-patch and
cross-patch view-invariance losses weighted by P.

Each has a scalar reference form and a batched :class:`Tensor` form used by
the experimental training modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gmm import GmmParams, posterior_high
from .nn import Tensor
from .nn import tensor as T


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.margin) or self.margin < 0:
            raise ConfigError(f"margin must be finite and >= 0, got {self.margin}")


def soft_triplet_loss(P: float, D: float, cfg: TripletConfig = TripletConfig()) -> float:
    """max(0, (1 - P) * D - P * D + m)."""
    return max(0.0, (1.0 - 2.0 * P) * D + cfg.margin)


def soft_triplet_loss_tensor(P: np.ndarray, D: Tensor, margin: float) -> Tensor:
    """Batch mean of the soft triplet loss; ``P`` is a constant."""
    w = (1.0 - 2.0 * np.asarray(P)).astype(D.dtype)
    return T.tmean(T.relu(D * w + margin))


def logit_soft_label(params: GmmParams, z):
    """P = 1 - posterior of the high component at logit ``z``.

    A high logit means the pair looks normal, so abnormality is the
    low-logit component.
    """
    post = 1.0 - posterior_high(params, z)
    return float(post[0]) if np.ndim(z) == 0 else post


@dataclass(frozen=True)
class ViewLossGrid:
    """Pairwise view losses; v1x are views of patch 1, v2x of patch 2."""

    l11_12: float
    l21_22: float
    l11_21: float
    l11_22: float
    l12_21: float
    l12_22: float

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"view loss {name} must be finite and >= 0, got {v}")

    @property
    def same_patch_mean(self) -> float:
        return (self.l11_12 + self.l21_22) / 2.0

    @property
    def cross_patch_mean(self) -> float:
        return (self.l11_21 + self.l11_22 + self.l12_21 + self.l12_22) / 4.0


def ssl_mix_loss(P: float, grid: ViewLossGrid) -> float:
    return P * grid.same_patch_mean + (1.0 - P) * grid.cross_patch_mean


def normalized_mse(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row mean squared error between unit-normalized embeddings."""

    def unit(x):
        norm = T.sqrt(T.tsum(x * x, axis=1, keepdims=True) + eps)
        return x / norm

    d = unit(a) - unit(b)
    return T.tmean(d * d, axis=1)


def ssl_mix_loss_tensor(P: np.ndarray, v11: Tensor, v12: Tensor, v21: Tensor, v22: Tensor,
                        view_loss=normalized_mse) -> Tensor:
    """Batch mean of the P-weighted same/cross view loss combination."""
    same = (view_loss(v11, v12) + view_loss(v21, v22)) * 0.5
    cross = (view_loss(v11, v21) + view_loss(v11, v22)
             + view_loss(v12, v21) + view_loss(v12, v22)) * 0.25
    p = np.asarray(P).astype(same.dtype)
    return T.tmean(same * p + cross * (1.0 - p))


def augment(patches: np.ndarray, rng: np.random.Generator, noise: float = 0.02) -> np.ndarray:
    """A random view: horizontal/vertical flips plus mild Gaussian noise,
    clipped back to [0, 1]."""
    out = patches.copy()
    n = len(out)
    hflip = rng.random(n) < 0.5
    vflip = rng.random(n) < 0.5
    out[hflip] = out[hflip][:, :, ::-1]
    out[vflip] = out[vflip][:, ::-1, :]
    out += rng.normal(0.0, noise, size=out.shape).astype(out.dtype)
    return np.clip(out, 0.0, 1.0)
