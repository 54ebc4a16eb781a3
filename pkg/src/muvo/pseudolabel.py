"""Pseudo-label machinery for the unlabeled target branch.

Three pieces live here:

* a per-class confidence bank (EMA of model confidence on unlabeled data)
  driving adaptive probability redistribution: confidence is subtracted from
  the weak view's logits and added to the first strong view's, shrinking the
  decision regions of over-confident classes and growing the weak ones;
* pseudo-negative labels: a uniformly random set of m classes excluding the
  predicted one, supervised through -log(1 - p);
* the squared-difference consistency loss between the two strong views.

Loss functions come in two forms: the per-sample value form, and a
``*_batch`` form returning (mean loss, gradient w.r.t. the relevant logits).
Pseudo-labels, threshold masks, and the bank are gradient constants: nothing
flows back through the weak view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateInputError, InvalidConfigError, InvalidInputError
from .numerics import check_logits, check_prob_vector, ema_update, softmax

# Probabilities are clamped to [LOG_EPS, 1 - LOG_EPS] inside logs so that
# saturated predictions yield large finite losses instead of infinities.
LOG_EPS = 1e-12

STAT_MODES = ("argmax_mean", "class_mean")


@dataclass
class ConfidenceBank:
    """Per-class EMA confidence in (0, 1], starting unbiased at all ones."""

    values: np.ndarray
    momentum: float = 0.999
    debias_factor: float = 0.2

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("bank momentum must be in [0, 1)")
        if self.debias_factor < 0:
            raise InvalidConfigError("debias factor must be >= 0")
        if np.any(self.values <= 0) or np.any(self.values > 1):
            raise InvalidInputError("confidence values must lie in (0, 1]")

    @classmethod
    def create(cls, classes: int, momentum=0.999, debias_factor=0.2):
        return cls(values=np.ones(classes), momentum=momentum,
                   debias_factor=debias_factor)

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "momentum": self.momentum,
                "debias_factor": self.debias_factor}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(values=np.asarray(d["values"], dtype=np.float64),
                   momentum=d["momentum"], debias_factor=d["debias_factor"])


def update_confidence_bank(bank: ConfidenceBank, weak_probs,
                           mode: str = "argmax_mean") -> ConfidenceBank:
    """EMA-blend this batch's per-class confidence statistic into the bank.

    ``weak_probs`` are predictions for weakly augmented target-unlabeled
    samples only. In ``argmax_mean`` mode the statistic for class c is the
    mean max-probability over samples predicted as c, and classes absent
    from the batch keep their value. ``class_mean`` instead averages p_c
    over the whole batch for every class. Empty batches are a no-op.
    """
    if mode not in STAT_MODES:
        raise InvalidConfigError(f"unknown confidence statistic mode '{mode}'")
    probs = np.asarray(weak_probs, dtype=np.float64)
    if probs.size == 0:
        return bank
    probs = check_prob_vector(probs if probs.ndim == 2 else probs[None, :])
    if mode == "class_mean":
        stat = probs.mean(axis=0)
        bank.values = ema_update(bank.values, stat, bank.momentum)
        return bank
    preds = np.argmax(probs, axis=1)
    maxes = probs.max(axis=1)
    for c in np.unique(preds):
        stat = float(maxes[preds == c].mean())
        bank.values[c] = ema_update(bank.values[c], stat, bank.momentum)
    return bank


def _check_bank(bank: ConfidenceBank) -> np.ndarray:
    if np.any(bank.values <= 0):
        raise DegenerateInputError(
            "confidence bank contains non-positive entries; log undefined")
    return np.log(bank.values)


def debiased_prediction(z_weak, bank: ConfidenceBank) -> np.ndarray:
    """Softmax of the weak logits with factor*log(confidence) subtracted.

    Subtracting the (negative) log confidence boosts under-confident classes,
    so the resulting pseudo-labels lean away from dominant classes.
    """
    z = check_logits(z_weak)
    return softmax(z - bank.debias_factor * _check_bank(bank))


def biased_prediction(z_strong, bank: ConfidenceBank) -> np.ndarray:
    """Softmax of the strong logits with factor*log(confidence) added.

    The reversed shift exaggerates the model's existing bias on the strong
    view, so the debiased supervision target has to fight against it.
    """
    z = check_logits(z_strong)
    return softmax(z + bank.debias_factor * _check_bank(bank))


def dcl_loss(pw_debiased, ps1_biased, threshold: float):
    """Debiased-consistency loss for one sample.

    Returns (loss, passed): cross-entropy of the biased strong prediction
    against the debiased pseudo-label when the debiased confidence clears
    ``threshold``, else (0.0, False).
    """
    pw = check_prob_vector(pw_debiased)
    ps1 = check_prob_vector(ps1_biased)
    if float(pw.max()) < threshold:
        return 0.0, False
    label = int(np.argmax(pw))
    return float(-np.log(max(ps1[label], LOG_EPS))), True


def dcl_loss_batch(pw_debiased, ps1_biased, threshold: float):
    """Batch form: (mean loss, dL/dz_s1, mask).

    Masked-out samples contribute zero while the denominator stays the full
    batch size (standard thresholded-consistency convention).
    """
    pw = np.asarray(pw_debiased, dtype=np.float64)
    ps1 = np.asarray(ps1_biased, dtype=np.float64)
    n, classes = pw.shape
    labels = np.argmax(pw, axis=1)
    mask = pw.max(axis=1) >= threshold
    picked = np.clip(ps1[np.arange(n), labels], LOG_EPS, None)
    loss = float(-(np.log(picked) * mask).sum() / n)
    onehot = np.zeros_like(ps1)
    onehot[np.arange(n), labels] = 1.0
    grad = mask[:, None] * (ps1 - onehot) / n
    return loss, grad, mask


def sample_negative_labels(p_weak, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random m-subset of the non-argmax classes, as a multi-hot row."""
    p = check_prob_vector(p_weak)
    classes = p.shape[-1]
    if not 1 <= m <= classes - 1:
        raise InvalidConfigError(
            f"m must be in [1, {classes - 1}] for {classes} classes, got {m}")
    predicted = int(np.argmax(p))
    candidates = np.delete(np.arange(classes), predicted)
    chosen = rng.choice(candidates, size=m, replace=False)
    out = np.zeros(classes, dtype=np.float64)
    out[chosen] = 1.0
    return out


def sample_negative_labels_batch(probs, m: int,
                                 rng: np.random.Generator) -> np.ndarray:
    """Row-wise uniform m-subsets of the non-argmax classes.

    Vectorized via random sort keys (one uniform draw per class and row):
    the m smallest keys among the candidates form a uniform m-subset.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    n, classes = probs.shape
    if not 1 <= m <= classes - 1:
        raise InvalidConfigError(
            f"m must be in [1, {classes - 1}] for {classes} classes, got {m}")
    keys = rng.random((n, classes))
    keys[np.arange(n), np.argmax(probs, axis=1)] = np.inf
    chosen = np.argpartition(keys, m - 1, axis=1)[:, :m]
    out = np.zeros((n, classes), dtype=np.float64)
    np.put_along_axis(out, chosen, 1.0, axis=1)
    return out


def ncl_loss(y_negative, p_s2) -> float:
    """Negative-label loss for one sample: -sum_c y_c * log(1 - p_c)."""
    y = np.asarray(y_negative, dtype=np.float64)
    p = check_prob_vector(p_s2)
    return float(-(y * np.log(np.clip(1.0 - p, LOG_EPS, None))).sum())


def ncl_loss_batch(y_negative, p_s2):
    """Batch form: (mean loss, dL/dz_s2)."""
    y = np.asarray(y_negative, dtype=np.float64)
    p = np.asarray(p_s2, dtype=np.float64)
    n = p.shape[0]
    q = np.clip(1.0 - p, LOG_EPS, None)
    loss = float(-(y * np.log(q)).sum() / n)
    # d(-log(1-p_c))/dz_j = p_c (delta_cj - p_j) / (1 - p_c)
    r = y * p / q
    grad = (r - p * r.sum(axis=1, keepdims=True)) / n
    return loss, grad


def consistency_loss(p_s1, p_s2) -> float:
    """Squared difference between the two strong-view softmax predictions."""
    p1 = check_prob_vector(p_s1)
    p2 = check_prob_vector(p_s2)
    if p1.shape != p2.shape:
        raise InvalidInputError("consistency loss needs equal-length vectors")
    return float(((p1 - p2) ** 2).sum())


def consistency_loss_batch(p_s1, p_s2):
    """Batch form: (mean loss, dL/dz_s1, dL/dz_s2); both views get gradient."""
    p1 = np.asarray(p_s1, dtype=np.float64)
    p2 = np.asarray(p_s2, dtype=np.float64)
    n = p1.shape[0]
    d = p1 - p2
    loss = float((d ** 2).sum(axis=1).mean())
    g1 = 2.0 * p1 * (d - (d * p1).sum(axis=1, keepdims=True)) / n
    g2 = -2.0 * p2 * (d - (d * p2).sum(axis=1, keepdims=True)) / n
    return loss, g1, g2


@dataclass
class PseudoLabelOutput:
    """Pseudo-label bundle for one unlabeled sample."""

    debiased_probs: np.ndarray
    debiased_label: np.ndarray        # one-hot
    passes_threshold: bool
    negative_labels: np.ndarray       # multi-hot with exactly m ones


@dataclass
class PseudoLabelBatch:
    """Vectorized pseudo-labels for an unlabeled batch (see step logic)."""

    raw_probs: np.ndarray       # plain softmax of the weak logits
    debiased_probs: np.ndarray
    labels: np.ndarray          # argmax of debiased_probs, (n,)
    mask: np.ndarray            # debiased max-prob >= threshold, (n,) bool
    negatives: np.ndarray = field(default=None)  # (n, C) or None when unused


def generate_pseudo_labels(z_weak, bank: ConfidenceBank, threshold: float,
                           m: int | None = None,
                           rng: np.random.Generator | None = None
                           ) -> PseudoLabelBatch:
    """Derive all pseudo-label quantities from one weak-view logit batch.

    Negative labels are drawn from the *raw* prediction's non-argmax classes
    (the debiased argmax may differ and is allowed to appear among them);
    pass ``m=None`` to skip drawing them.
    """
    z = check_logits(z_weak)
    if z.ndim == 1:
        z = z[None, :]
    raw = softmax(z)
    deb = debiased_prediction(z, bank)
    labels = np.argmax(deb, axis=1)
    mask = deb.max(axis=1) >= threshold
    negatives = None
    if m is not None:
        if rng is None:
            raise InvalidInputError("negative sampling requires an rng")
        negatives = sample_negative_labels_batch(raw, m, rng)
    return PseudoLabelBatch(raw_probs=raw, debiased_probs=deb, labels=labels,
                            mask=mask, negatives=negatives)


def pseudo_label_single(z_weak, bank: ConfidenceBank, threshold: float, m: int,
                        rng: np.random.Generator) -> PseudoLabelOutput:
    """Single-sample convenience wrapper returning the spec'd bundle."""
    batch = generate_pseudo_labels(np.atleast_2d(z_weak), bank, threshold, m, rng)
    onehot = np.zeros_like(batch.debiased_probs[0])
    onehot[batch.labels[0]] = 1.0
    return PseudoLabelOutput(
        debiased_probs=batch.debiased_probs[0],
        debiased_label=onehot,
        passes_threshold=bool(batch.mask[0]),
        negative_labels=batch.negatives[0],
    )
