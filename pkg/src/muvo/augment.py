"""Weak and strong stochastic augmentations for vector-valued samples.

One weak and two strong views drive the consistency machinery. The weak view
adds small Gaussian noise; the strong view applies coordinate dropout, a
per-sample uniform rescale, then heavier noise. Callers own the rng streams,
so two strong calls with independent generators give independent views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidConfigError


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.3
    strong_dropout_prob: float = 0.0
    strong_scale_range: tuple[float, float] = (1.0, 1.0)
    rng_seed: int = 0

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise InvalidConfigError("noise sigmas must be >= 0")
        if self.strong_noise_sigma < self.weak_noise_sigma:
            raise InvalidConfigError(
                "strong_noise_sigma must be >= weak_noise_sigma")
        if not 0.0 <= self.strong_dropout_prob < 1.0:
            raise InvalidConfigError("strong_dropout_prob must be in [0, 1)")
        lo, hi = self.strong_scale_range
        if not 0.0 < lo <= hi:
            raise InvalidConfigError("strong_scale_range needs 0 < lo <= hi")


def weak_augment(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise with std weak_noise_sigma per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    noise = rng.standard_normal(x.shape)
    return x + cfg.weak_noise_sigma * noise


def strong_augment(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Dropout -> one uniform scale per sample -> Gaussian noise, in that order.

    The draw order (mask, scale, noise) is fixed so streams replay exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= cfg.strong_dropout_prob
    lo, hi = cfg.strong_scale_range
    if x.ndim == 1:
        scale = rng.uniform(lo, hi)
    else:
        scale = rng.uniform(lo, hi, size=(x.shape[0], 1))
    noise = rng.standard_normal(x.shape)
    return x * keep * scale + cfg.strong_noise_sigma * noise
