"""Training objectives.

All losses take batched tensors and return a scalar that is the batch mean
of a per-sample value. Raw estimator scores are pre-sigmoid and go through
``logsigmoid`` so the MI terms stay finite for any finite score.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigError, ShapeError

_BINOMIAL = (1.0, 4.0, 6.0, 4.0, 1.0)


@dataclass(frozen=True)
class PyramidSpec:
    """``levels`` counts band-pass detail levels plus the low-pass residual."""

    levels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("pyramid needs at least one level")


@dataclass(frozen=True)
class LossWeights:
    lambda_lap: float = 1.0
    lambda_lat: float = 1.0
    lambda_mie: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")


# --------------------------------------------------------------------------
# Laplacian pyramid


@lru_cache(maxsize=64)
def _reflect_index(n, pad):
    return torch.from_numpy(np.pad(np.arange(n), pad, mode="reflect"))


def _blur(x, gain=1.0):
    """Separable 5-tap binomial blur with reflect borders; x is (B, C, H, W)."""
    c = x.shape[1]
    k = torch.tensor(_BINOMIAL, dtype=x.dtype, device=x.device) / 16.0
    x = x.index_select(3, _reflect_index(x.shape[3], 2).to(x.device))
    x = F.conv2d(x, k.view(1, 1, 1, 5).expand(c, 1, 1, 5), groups=c)
    x = x.index_select(2, _reflect_index(x.shape[2], 2).to(x.device))
    x = F.conv2d(x, k.view(1, 1, 5, 1).expand(c, 1, 5, 1), groups=c)
    return x * gain if gain != 1.0 else x


def _downsample(x):
    return _blur(x)[:, :, ::2, ::2]


def _upsample(x, size):
    b, c, _, _ = x.shape
    up = x.new_zeros(b, c, *size)
    up[:, :, ::2, ::2] = x
    # zero insertion keeps 1 sample in 4; gain 4 restores the mean level
    return _blur(up, gain=4.0)


def laplacian_pyramid(x, levels=3):
    """Decompose (B, C, H, W) images into ``levels - 1`` detail bands plus a residual.

    Level ``j`` has spatial size ``ceil(H / 2**j)``.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    bands = []
    current = x
    for _ in range(levels - 1):
        low = _downsample(current)
        bands.append(current - _upsample(low, current.shape[-2:]))
        current = low
    bands.append(current)
    return bands


def collapse_pyramid(bands):
    out = bands[-1]
    for band in reversed(bands[:-1]):
        out = band + _upsample(out, band.shape[-2:])
    return out


def laplacian_pyramid_loss(x_hat, x, spec: PyramidSpec = PyramidSpec(), reduction="mean"):
    """Sum over levels of ``4**j * |Lap_j(x_hat) - Lap_j(x)|_1``.

    Each per-sample L1 sum is divided by the number of entries in the
    level-0 image. ``reduction="none"`` returns the per-sample values.
    """
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if x.ndim == 3:
        x_hat, x = x_hat[None], x[None]
    n_entries = x[0].numel()
    per_sample = x.new_zeros(len(x))
    for j, (a, b) in enumerate(zip(laplacian_pyramid(x_hat, spec.levels), laplacian_pyramid(x, spec.levels))):
        per_sample = per_sample + 4.0**j * (a - b).abs().flatten(1).sum(1)
    per_sample = per_sample / n_entries
    return per_sample if reduction == "none" else per_sample.mean()


def mse_loss(x_hat, x, reduction="mean"):
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if x.ndim == 3:
        x_hat, x = x_hat[None], x[None]
    per_sample = (x_hat - x).pow(2).flatten(1).mean(1)
    return per_sample if reduction == "none" else per_sample.mean()


# --------------------------------------------------------------------------
# latent and MI terms


def latent_loss(z_code, z):
    """Squared L2 distance between codes and encoder latents, batch mean."""
    if z_code.shape != z.shape:
        raise ShapeError(f"latent length mismatch: {tuple(z_code.shape)} vs {tuple(z.shape)}")
    if z.ndim == 1:
        return (z_code - z).pow(2).sum()
    return (z_code - z).pow(2).sum(1).mean()


def _js_terms(pos, neg):
    # log(1 - sigmoid(s)) == logsigmoid(-s)
    return F.logsigmoid(pos).mean(0) + F.logsigmoid(-neg).mean(0)


def global_mi_loss(score_pos, score_neg, beta=0.5):
    score_pos = torch.as_tensor(score_pos)
    score_neg = torch.as_tensor(score_neg, dtype=score_pos.dtype)
    return -beta * _js_terms(score_pos.reshape(-1), score_neg.reshape(-1))


def local_mi_loss(map_pos, map_neg, beta=0.5):
    """Per-location JS bound averaged over the H x W map. Maps are (B, H, W)."""
    if map_pos.shape[1:] != map_neg.shape[1:]:
        raise ShapeError(f"score map shapes differ: {tuple(map_pos.shape)} vs {tuple(map_neg.shape)}")
    h, w = map_pos.shape[-2:]
    return -(beta / (h * w)) * _js_terms(map_pos, map_neg).sum()


def prior_loss(mu, logvar, gamma=0.1):
    """gamma * batch-mean KL(N(mu, exp(logvar)) || N(0, I))."""
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar must have the same shape")
    if mu.ndim == 1:
        mu, logvar = mu[None], logvar[None]
    kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(1)
    return gamma * kl.mean()


def mie_loss(global_term, local_term, prior_term):
    return global_term + local_term + prior_term


def total_loss(lap, lat, mie, weights: LossWeights):
    return weights.lambda_lap * lap + weights.lambda_lat * lat + weights.lambda_mie * mie
