"""Finite-difference validation of every analytic gradient path.

Builds a small seeded instance (4 -> 8 -> 5 features, 3 classes, batch 6),
freezes all pseudo-label constants at the base parameters, then compares the
analytic parameter gradient of each loss term (and of the assembled total)
against central finite differences. Pseudo-labels, threshold masks, the
confidence bank, prototypes, and queue contents are constants by design, so
they are held fixed while parameters are perturbed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .affinity import (AffinityConfig, PrototypeBank, SourceBank,
                       clu_loss_batch, ctr_loss_batch)
from .model import PARAM_KEYS, accumulate_grads, backward, forward, init_model, zero_grads
from .numerics import softmax
from .pseudolabel import (ConfidenceBank, biased_prediction,
                          consistency_loss_batch, dcl_loss_batch,
                          debiased_prediction, ncl_loss_batch,
                          sample_negative_labels_batch)
from .trainer import _ce_grad, _ce_mean

LOSS_NAMES = ("sup", "dcl", "ncl", "con", "ctr", "clu", "total")

DEFAULTS = dict(input_dim=4, hidden_dim=8, feature_dim=5, classes=3, batch=6,
                eps=1e-5, tol=1e-4, con_weight=30.0, cda_weight=1.0)


@dataclass
class RowResult:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    rows: list
    elapsed_seconds: float
    tol: float

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.rows)


def _flatten(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in PARAM_KEYS])


def _get_vector(state) -> np.ndarray:
    return np.concatenate([getattr(state, k).ravel() for k in PARAM_KEYS])


def _set_vector(state, vec: np.ndarray) -> None:
    pos = 0
    for k in PARAM_KEYS:
        p = getattr(state, k)
        p[...] = vec[pos:pos + p.size].reshape(p.shape)
        pos += p.size


class _Case:
    """One frozen gradcheck instance: inputs, banks, pseudo-label constants."""

    def __init__(self, seed: int, spec: dict):
        rng = np.random.default_rng(seed)
        d_in, batch, classes = spec["input_dim"], spec["batch"], spec["classes"]
        self.spec = spec
        self.state = init_model(d_in, spec["hidden_dim"], spec["feature_dim"],
                                classes, "tanh", rng=rng)
        self.x_source = rng.normal(size=(batch, d_in))
        self.y_source = rng.integers(0, classes, size=batch)
        self.x_labeled = rng.normal(size=(batch, d_in))
        self.y_labeled = rng.integers(0, classes, size=batch)
        self.x_weak = rng.normal(size=(batch, d_in))
        self.x_strong1 = self.x_weak + 0.3 * rng.normal(size=(batch, d_in))
        self.x_strong2 = self.x_weak + 0.3 * rng.normal(size=(batch, d_in))

        self.bank = ConfidenceBank(values=rng.uniform(0.2, 1.0, size=classes),
                                   momentum=0.999, debias_factor=0.2)
        self.affinity = AffinityConfig(tau=0.1, capacity=8, weight=1.0)
        self.protos = PrototypeBank(values=rng.normal(size=(classes,
                                                            spec["feature_dim"])),
                                    initialized=np.ones(classes, dtype=bool),
                                    momentum=0.999)
        self.source_bank = SourceBank.create(classes, capacity=8)
        for c in range(classes):
            for _ in range(3):
                self.source_bank.admit(c, rng.normal(size=spec["feature_dim"]))

        # Pseudo-label constants frozen at the base parameters.
        z_weak = forward(self.state, self.x_weak).logits
        self.deb_weak = debiased_prediction(z_weak, self.bank)
        maxes = np.sort(self.deb_weak.max(axis=1))
        self.threshold = float(maxes[batch // 2]) - 1e-9  # mixed mask
        self.negatives = sample_negative_labels_batch(softmax(z_weak), 2, rng)

    # Every loss exposes value(state) and grads(state); the constants above
    # never move during perturbation.

    def value(self, name: str) -> float:
        spec = self.spec
        if name == "sup":
            p_s = softmax(forward(self.state, self.x_source).logits)
            p_tl = softmax(forward(self.state, self.x_labeled).logits)
            return _ce_mean(p_s, self.y_source) + _ce_mean(p_tl, self.y_labeled)
        if name == "dcl":
            ps1 = biased_prediction(forward(self.state, self.x_strong1).logits,
                                    self.bank)
            loss, _, _ = dcl_loss_batch(self.deb_weak, ps1, self.threshold)
            return loss
        if name == "ncl":
            ps2 = softmax(forward(self.state, self.x_strong2).logits)
            loss, _ = ncl_loss_batch(self.negatives, ps2)
            return loss
        if name == "con":
            p1 = softmax(forward(self.state, self.x_strong1).logits)
            p2 = softmax(forward(self.state, self.x_strong2).logits)
            loss, _, _ = consistency_loss_batch(p1, p2)
            return loss
        if name == "ctr":
            feats = forward(self.state, self.x_source).features
            loss, _ = ctr_loss_batch(feats, self.y_source, self.protos,
                                     self.affinity)
            return loss
        if name == "clu":
            feats = forward(self.state, self.x_source).features
            loss, _ = clu_loss_batch(feats, self.y_source, self.source_bank)
            return loss
        if name == "total":
            return (self.value("sup") + self.value("dcl") + self.value("ncl")
                    + spec["con_weight"] * self.value("con")
                    + spec["cda_weight"] * (self.value("ctr")
                                            + self.value("clu")))
        raise ValueError(name)

    def grads(self, name: str) -> dict:
        spec = self.spec
        state = self.state
        if name == "sup":
            cache_s = forward(state, self.x_source)
            cache_tl = forward(state, self.x_labeled)
            g = backward(state, cache_s, _ce_grad(softmax(cache_s.logits),
                                                  self.y_source))
            return accumulate_grads(g, backward(
                state, cache_tl, _ce_grad(softmax(cache_tl.logits),
                                          self.y_labeled)))
        if name == "dcl":
            cache = forward(state, self.x_strong1)
            ps1 = biased_prediction(cache.logits, self.bank)
            _, dz, _ = dcl_loss_batch(self.deb_weak, ps1, self.threshold)
            return backward(state, cache, dz)
        if name == "ncl":
            cache = forward(state, self.x_strong2)
            _, dz = ncl_loss_batch(self.negatives, softmax(cache.logits))
            return backward(state, cache, dz)
        if name == "con":
            c1 = forward(state, self.x_strong1)
            c2 = forward(state, self.x_strong2)
            _, g1, g2 = consistency_loss_batch(softmax(c1.logits),
                                               softmax(c2.logits))
            g = backward(state, c1, g1)
            return accumulate_grads(g, backward(state, c2, g2))
        if name == "ctr":
            cache = forward(state, self.x_source)
            _, dfeat = ctr_loss_batch(cache.features, self.y_source,
                                      self.protos, self.affinity)
            return backward(state, cache, np.zeros_like(cache.logits), dfeat)
        if name == "clu":
            cache = forward(state, self.x_source)
            _, dfeat = clu_loss_batch(cache.features, self.y_source,
                                      self.source_bank)
            return backward(state, cache, np.zeros_like(cache.logits), dfeat)
        if name == "total":
            total = self.grads("sup")
            for part, w in (("dcl", 1.0), ("ncl", 1.0),
                            ("con", spec["con_weight"]),
                            ("ctr", spec["cda_weight"]),
                            ("clu", spec["cda_weight"])):
                part_grads = self.grads(part)
                accumulate_grads(total, {k: w * v
                                         for k, v in part_grads.items()})
            return total
        raise ValueError(name)


def _max_rel_error(case: _Case, name: str, eps: float,
                   corrupt: bool) -> float:
    analytic = _flatten(case.grads(name))
    if corrupt:
        analytic = -analytic  # test hook: wrong-sign gradient must be caught
    base = _get_vector(case.state)
    fd = np.empty_like(base)
    for i in range(base.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            vec = base.copy()
            vec[i] += sign * eps
            _set_vector(case.state, vec)
            if slot == 0:
                hi = case.value(name)
            else:
                lo = case.value(name)
        fd[i] = (hi - lo) / (2 * eps)
    _set_vector(case.state, base)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float((np.abs(analytic - fd) / denom).max())


def run_gradcheck(seed: int = 0, eps: float = None, tol: float = None,
                  corrupt: str = None, spec: dict = None) -> GradCheckReport:
    """Check all six loss gradients plus the assembled total.

    ``corrupt`` names a loss whose analytic gradient is sign-flipped before
    comparison; it exists so tests can confirm the detector actually detects.
    """
    spec = dict(DEFAULTS, **(spec or {}))
    eps = spec["eps"] if eps is None else eps
    tol = spec["tol"] if tol is None else tol
    case = _Case(seed, spec)
    start = time.perf_counter()
    rows = []
    for name in LOSS_NAMES:
        err = _max_rel_error(case, name, eps, corrupt == name)
        rows.append(RowResult(name=name, max_rel_error=err, passed=err < tol))
    return GradCheckReport(rows=rows, elapsed_seconds=time.perf_counter() - start,
                           tol=tol)


def format_report(report: GradCheckReport) -> str:
    lines = [f"{'loss':<8}{'max_rel_error':>16}  status"]
    for row in report.rows:
        status = "PASS" if row.passed else "FAIL"
        lines.append(f"{row.name:<8}{row.max_rel_error:>16.3e}  {status}")
    lines.append(f"tolerance {report.tol:g}, "
                 f"elapsed {report.elapsed_seconds:.2f}s")
    return "\n".join(lines)
