"""Deterministic numerical primitives shared by every other module.

Probability and logit vectors are plain float64 numpy arrays; the
``check_*`` helpers enforce their invariants at API boundaries. All
functions here are pure and safe to call from any thread.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DegenerateInputError, InvalidConfigError, InvalidInputError

# Tolerance for the sum-to-one invariant of probability vectors.
PROB_SUM_TOL = 1e-9


def check_logits(z) -> np.ndarray:
    """Validate a logit vector (or batch of row vectors): finite entries only."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    return z


def check_prob_vector(p) -> np.ndarray:
    """Validate a probability vector (or batch of rows): entries in [0, 1],
    rows summing to 1 within ``PROB_SUM_TOL``."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("probabilities must be finite")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROB_SUM_TOL):
        raise InvalidInputError("probabilities must sum to 1")
    return p


def softmax(z) -> np.ndarray:
    """Numerically stabilized softmax over the last axis.

    Max-subtraction keeps the exponentials bounded, so inputs like
    ``[1000, 0]`` neither overflow nor produce NaNs.
    """
    z = check_logits(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot_argmax(p) -> np.ndarray:
    """One-hot vector selecting the maximum entry; ties break to the lowest index."""
    p = check_prob_vector(p)
    if p.ndim != 1:
        raise InvalidInputError("one_hot_argmax expects a single probability vector")
    out = np.zeros_like(p)
    out[int(np.argmax(p))] = 1.0
    return out


def one_hot(index: int, classes: int) -> np.ndarray:
    """One-hot row of length ``classes`` with a 1 at ``index``."""
    if not 0 <= index < classes:
        raise InvalidInputError(f"class index {index} outside [0, {classes})")
    out = np.zeros(classes, dtype=np.float64)
    out[index] = 1.0
    return out


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def ema_update(old, new_value, momentum: float):
    """Exponential moving average step: momentum*old + (1-momentum)*new_value.

    Applied element-wise when the arguments are arrays. ``momentum`` must lie
    in [0, 1); with momentum 0 the history is forgotten entirely.
    """
    if not 0.0 <= momentum < 1.0:
        raise InvalidConfigError(f"EMA momentum must be in [0, 1), got {momentum}")
    old = np.asarray(old, dtype=np.float64)
    new_value = np.asarray(new_value, dtype=np.float64)
    result = momentum * old + (1.0 - momentum) * new_value
    if result.ndim == 0:
        return float(result)
    return result
