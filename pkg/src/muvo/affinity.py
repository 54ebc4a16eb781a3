"""Cross-domain affinity learning: prototypes, source bank, and losses.

Target-domain class prototypes are EMA means of confidently pseudo-labeled
target features. Source features whose nearest prototype, model prediction,
and ground truth all agree are admitted into per-class FIFO queues. Two
losses pull source features toward their class prototype (InfoNCE over
prototypes) and toward the admitted source features of their class (mean
cosine distance). Prototypes and queue contents are detached snapshots:
gradients flow only into the live source feature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateInputError, InvalidConfigError
from .numerics import ema_update, softmax


@dataclass(frozen=True)
class AffinityConfig:
    tau: float = 0.1          # InfoNCE temperature
    capacity: int = 64        # per-class queue size
    weight: float = 1.0       # weight of the combined affinity loss
    normalize: bool = True    # L2-normalize features/prototypes in the InfoNCE

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidConfigError("tau must be > 0")
        if self.capacity <= 0:
            raise InvalidConfigError("capacity must be > 0")
        if self.weight < 0:
            raise InvalidConfigError("weight must be >= 0")


@dataclass
class PrototypeBank:
    """EMA class prototypes; a class is unusable until first initialized."""

    values: np.ndarray          # (C, d)
    initialized: np.ndarray     # (C,) bool
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfigError("prototype momentum must be in [0, 1)")

    @classmethod
    def create(cls, classes: int, dim: int, momentum=0.999):
        return cls(values=np.zeros((classes, dim)),
                   initialized=np.zeros(classes, dtype=bool),
                   momentum=momentum)

    def to_dict(self):
        return {"values": self.values.tolist(),
                "initialized": self.initialized.tolist(),
                "momentum": self.momentum}

    @classmethod
    def from_dict(cls, d):
        return cls(values=np.asarray(d["values"], dtype=np.float64),
                   initialized=np.asarray(d["initialized"], dtype=bool),
                   momentum=d["momentum"])


@dataclass
class SourceBank:
    """Per-class FIFO queues of admitted source features, oldest first."""

    capacity: int
    queues: list[list[np.ndarray]] = field(default_factory=list)

    @classmethod
    def create(cls, classes: int, capacity: int):
        if capacity <= 0:
            raise InvalidConfigError("source bank capacity must be > 0")
        return cls(capacity=capacity, queues=[[] for _ in range(classes)])

    def admit(self, class_idx: int, feature: np.ndarray) -> None:
        q = self.queues[class_idx]
        q.append(np.array(feature, dtype=np.float64, copy=True))
        while len(q) > self.capacity:
            q.pop(0)

    def occupancy(self) -> list[int]:
        return [len(q) for q in self.queues]

    def to_dict(self):
        return {"capacity": self.capacity,
                "queues": [[f.tolist() for f in q] for q in self.queues]}

    @classmethod
    def from_dict(cls, d):
        return cls(capacity=d["capacity"],
                   queues=[[np.asarray(f, dtype=np.float64) for f in q]
                           for q in d["queues"]])


def update_prototypes(bank: PrototypeBank, features, classes) -> PrototypeBank:
    """Blend this step's per-class feature means into the prototypes.

    The first batch seen for a class sets its prototype directly; afterwards
    the update is an EMA step. Classes with no assigned samples are skipped.
    """
    features = np.asarray(features, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    if features.size == 0:
        return bank
    for c in np.unique(classes):
        step_mean = features[classes == c].mean(axis=0)
        if bank.initialized[c]:
            bank.values[c] = ema_update(bank.values[c], step_mean, bank.momentum)
        else:
            bank.values[c] = step_mean
            bank.initialized[c] = True
    return bank


def _nearest_prototype(bank: PrototypeBank, feature: np.ndarray) -> int | None:
    """Index of the most cosine-similar initialized prototype, or None.

    Zero-norm prototypes can never win; ties break to the lowest class index.
    """
    init = np.flatnonzero(bank.initialized)
    if init.size == 0:
        return None
    fnorm = np.linalg.norm(feature)
    if fnorm == 0.0:
        return None
    protos = bank.values[init]
    norms = np.linalg.norm(protos, axis=1)
    sims = np.full(init.size, -np.inf)
    ok = norms > 0
    sims[ok] = protos[ok] @ feature / (norms[ok] * fnorm)
    return int(init[int(np.argmax(sims))])


def try_admit(source_bank: SourceBank, proto_bank: PrototypeBank, feature,
              predicted: int, ground_truth: int) -> bool:
    """Admit a source feature iff nearest prototype, prediction, and truth agree.

    Zero-norm features are degenerate and always rejected. Admission evicts
    the oldest entry once the class queue exceeds capacity.
    """
    feature = np.asarray(feature, dtype=np.float64)
    nearest = _nearest_prototype(proto_bank, feature)
    if nearest is None:
        return False
    if not (nearest == predicted == ground_truth):
        return False
    source_bank.admit(ground_truth, feature)
    return True


def admit_batch(source_bank: SourceBank, proto_bank: PrototypeBank, features,
                predicted, ground_truth) -> int:
    """Vectorized ``try_admit`` over a batch; returns the admission count.

    Admission semantics are identical to the per-sample form: nearest
    initialized prototype (cosine, ties to the lowest class), prediction,
    and ground truth must all agree, and zero-norm features are rejected.
    """
    features = np.asarray(features, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.int64)
    ground_truth = np.asarray(ground_truth, dtype=np.int64)
    init = np.flatnonzero(proto_bank.initialized)
    if init.size == 0 or features.shape[0] == 0:
        return 0
    protos = proto_bank.values[init]
    pnorms = np.linalg.norm(protos, axis=1)
    fnorms = np.linalg.norm(features, axis=1)
    sims = features @ protos.T
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = sims / np.outer(fnorms, pnorms)
    sims[:, pnorms == 0.0] = -np.inf
    nearest = init[np.argmax(sims, axis=1)]
    ok = (fnorms > 0.0) & (nearest == predicted) & (predicted == ground_truth)
    for row in np.flatnonzero(ok):
        source_bank.admit(int(ground_truth[row]), features[row])
    return int(ok.sum())


def _contrastive_terms(feature, class_idx, protos: PrototypeBank,
                       cfg: AffinityConfig):
    """Similarity scores for one sample, or None when the positive is missing.

    Returns (init_indices, scores, pos_position, unit_feature, proto_matrix).
    """
    init = np.flatnonzero(protos.initialized)
    if init.size == 0 or not protos.initialized[class_idx]:
        return None
    p = protos.values[init]
    if cfg.normalize:
        fnorm = np.linalg.norm(feature)
        if fnorm == 0.0:
            raise DegenerateInputError("zero-norm feature in contrastive loss")
        pnorm = np.linalg.norm(p, axis=1)
        if np.any(pnorm == 0.0):
            raise DegenerateInputError("zero-norm prototype in contrastive loss")
        u = feature / fnorm
        p = p / pnorm[:, None]
        scores = p @ u / cfg.tau
        return init, scores, int(np.where(init == class_idx)[0][0]), u, p
    scores = p @ feature / cfg.tau
    return init, scores, int(np.where(init == class_idx)[0][0]), feature, p


def ctr_loss(feature, class_idx: int, protos: PrototypeBank,
             cfg: AffinityConfig) -> float:
    """InfoNCE over initialized prototypes with the class prototype positive.

    Samples whose positive prototype is uninitialized contribute 0. With a
    single initialized prototype the denominator equals the numerator.
    """
    feature = np.asarray(feature, dtype=np.float64)
    terms = _contrastive_terms(feature, class_idx, protos, cfg)
    if terms is None:
        return 0.0
    _, scores, pos, _, _ = terms
    q = softmax(scores)
    return float(-np.log(max(q[pos], 1e-300)))


def ctr_loss_batch(features, classes, protos: PrototypeBank,
                   cfg: AffinityConfig):
    """Batch form: (loss, dL/dfeatures). Mean over samples with an
    initialized positive prototype; zero when no sample qualifies.

    Vectorized over the batch; uninitialized prototypes get -inf scores so
    they vanish from the softmax, matching the per-sample exclusion rule.
    """
    features = np.asarray(features, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    n = features.shape[0]
    grad = np.zeros_like(features)
    init = protos.initialized
    contrib = init[classes]
    if n == 0 or not contrib.any():
        return 0.0, grad

    p = protos.values
    if cfg.normalize:
        fnorms = np.linalg.norm(features, axis=1)
        if np.any(fnorms[contrib] == 0.0):
            raise DegenerateInputError("zero-norm feature in contrastive loss")
        pnorms = np.linalg.norm(p, axis=1)
        if np.any(pnorms[init] == 0.0):
            raise DegenerateInputError("zero-norm prototype in contrastive loss")
        u = features / np.maximum(fnorms, 1e-300)[:, None]
        p = p / np.maximum(pnorms, 1e-300)[:, None]
    else:
        u = features
    scores = u @ p.T / cfg.tau
    scores[:, ~init] = -np.inf
    shifted = scores - scores.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    q = exps / exps.sum(axis=1, keepdims=True)

    rows = np.flatnonzero(contrib)
    picked = np.clip(q[rows, classes[rows]], 1e-300, None)
    count = rows.size
    loss = float(-np.log(picked).sum() / count)

    dscores = q.copy()
    dscores[rows, classes[rows]] -= 1.0
    dscores[~contrib] = 0.0
    du = dscores @ p / cfg.tau / count
    if cfg.normalize:
        proj = (u * du).sum(axis=1, keepdims=True)
        grad[rows] = ((du - proj * u) / fnorms[:, None])[rows]
    else:
        grad[rows] = du[rows]
    return loss, grad


def clu_loss(feature, class_idx: int, bank: SourceBank) -> float:
    """Mean cosine distance to the stored features of the sample's class.

    Empty queues give 0; zero-norm stored entries are skipped with a warning
    (they can only appear through corrupted state, never via ``try_admit``).
    """
    feature = np.asarray(feature, dtype=np.float64)
    queue = bank.queues[class_idx]
    if not queue:
        return 0.0
    fnorm = np.linalg.norm(feature)
    if fnorm == 0.0:
        raise DegenerateInputError("zero-norm feature in cluster loss")
    total = 0.0
    valid = 0
    for stored in queue:
        snorm = np.linalg.norm(stored)
        if snorm == 0.0:
            warnings.warn("skipping zero-norm feature stored in source bank")
            continue
        total += 1.0 - float(feature @ stored) / (fnorm * snorm)
        valid += 1
    return total / valid if valid else 0.0


def clu_loss_batch(features, classes, bank: SourceBank):
    """Batch form: (loss, dL/dfeatures), mean over the whole batch.

    Works class by class so each queue is stacked into one matrix; the
    per-sample gradient is ((mean cos) * fhat - mean shat) / ||f||.
    """
    features = np.asarray(features, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    n = features.shape[0]
    grad = np.zeros_like(features)
    total = 0.0
    for c in np.unique(classes):
        queue = bank.queues[int(c)]
        if not queue:
            continue
        stored = np.stack(queue)
        snorms = np.linalg.norm(stored, axis=1)
        if np.any(snorms == 0.0):
            warnings.warn("skipping zero-norm feature stored in source bank")
            stored = stored[snorms > 0]
            snorms = snorms[snorms > 0]
            if stored.shape[0] == 0:
                continue
        shat = stored / snorms[:, None]
        rows = np.flatnonzero(classes == c)
        f = features[rows]
        fnorms = np.linalg.norm(f, axis=1)
        if np.any(fnorms == 0.0):
            raise DegenerateInputError("zero-norm feature in cluster loss")
        fhat = f / fnorms[:, None]
        cos = fhat @ shat.T                      # (rows, queue)
        total += float((1.0 - cos).mean(axis=1).sum())
        mean_shat = shat.mean(axis=0)
        grad[rows] = (cos.mean(axis=1)[:, None] * fhat
                      - mean_shat) / fnorms[:, None]
    return total / n, grad / n


def cda_loss(feature, class_idx: int, protos: PrototypeBank, bank: SourceBank,
             cfg: AffinityConfig) -> float:
    """Combined affinity loss for one sample: contrastive + cluster terms."""
    return ctr_loss(feature, class_idx, protos, cfg) + \
        clu_loss(feature, class_idx, bank)


def cda_loss_batch(features, classes, protos: PrototypeBank, bank: SourceBank,
                   cfg: AffinityConfig):
    """Batch form: (cda, ctr, clu, dL/dfeatures)."""
    ctr, g_ctr = ctr_loss_batch(features, classes, protos, cfg)
    clu, g_clu = clu_loss_batch(features, classes, bank)
    return ctr + clu, ctr, clu, g_ctr + g_clu
