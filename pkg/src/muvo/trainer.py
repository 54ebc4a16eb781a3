"""Training orchestration: staged iteration, warmup gating, loss assembly.

Each iteration runs three stages: (I) supervised cross-entropy on weakly
augmented labeled data from both domains, (II) the unlabeled-target stage
(confidence-bank update, debiased + negative pseudo-labels, the three
unsupervised losses), and (III), once warmup has elapsed, the affinity
stage (prototype updates, source-feature admissions, affinity losses). The
total loss is

    sup + dcl + ncl + ramp(t) * con + affinity_weight * cda

and one momentum-SGD step is taken on it. At the warmup boundary the
learning-rate schedule restarts. The whole run is a deterministic function
of (config, seed): every random draw comes from a named, purpose-specific
stream, so disabling one loss never perturbs the others' randomness.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affinity import (PrototypeBank, SourceBank, admit_batch, cda_loss_batch,
                       update_prototypes)
from .augment import strong_augment, weak_augment
from .data import TrainingData, equal_sampler
from .exceptions import (InvalidConfigError, InvalidInputError,
                         TrainingDivergedError, UsageError)
from .model import (ModelState, accumulate_grads, backward, effective_lr,
                    forward, init_model, init_optimizer, refresh_schedule,
                    save_checkpoint, sgd_step, zero_grads)
from .numerics import softmax
from .pseudolabel import (LOG_EPS, ConfidenceBank, biased_prediction,
                          consistency_loss_batch, dcl_loss_batch,
                          debiased_prediction, generate_pseudo_labels,
                          ncl_loss_batch, update_confidence_bank)

ABLATABLE = ("dcl", "ncl", "con", "cda")
GATING_MODES = ("always", "after_warmup")

LOSS_KEYS = ("total", "sup", "dcl", "ncl", "con", "cda", "ctr", "clu")
SUMMARY_COLUMNS = ("iteration", "lr", "loss_total", "loss_sup", "loss_dcl",
                   "loss_ncl", "loss_con", "loss_cda", "val_accuracy",
                   "confident_fraction")


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 4000
    warmup_iters: int = 800
    batch_size: int = 64
    consistency_weight: float = 30.0      # ramp plateau
    negative_gating: str = "after_warmup"  # or "always"
    eval_interval: int = 100
    seed: int = 0
    ablate: tuple = ()                    # subset of ABLATABLE

    def __post_init__(self):
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise InvalidConfigError(
                "need 0 <= warmup_iters <= total_iters")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.eval_interval < 1:
            raise InvalidConfigError("eval_interval must be >= 1")
        if self.negative_gating not in GATING_MODES:
            raise InvalidConfigError(
                f"negative_gating must be one of {GATING_MODES}")
        bad = set(self.ablate) - set(ABLATABLE)
        if bad:
            raise InvalidConfigError(f"unknown ablation target(s): {sorted(bad)}")


def ramp_weight(t: int, warmup: int, peak: float) -> float:
    """Consistency-weight ramp: peak * exp(-5 (1 - t/warmup)^2), clamped to
    ``peak`` once t reaches the warmup length (or immediately if warmup=0)."""
    if t < 0:
        raise UsageError("iteration must be >= 0")
    if warmup <= 0 or t >= warmup:
        return float(peak)
    return float(peak * np.exp(-5.0 * (1.0 - t / warmup) ** 2))


def _ce_mean(probs: np.ndarray, labels: np.ndarray) -> float:
    if probs.shape[0] == 0:
        return 0.0
    picked = np.clip(probs[np.arange(len(labels)), labels], LOG_EPS, None)
    return float(-np.log(picked).mean())


def _ce_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad / n


def _require_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (np.any(y < 0) or y.dtype == object):
        raise UsageError("supervised loss received unlabeled samples")
    return y.astype(np.int64)


def supervised_loss(state: ModelState, x_source, y_source, x_target_labeled,
                    y_target_labeled) -> float:
    """Mean source cross-entropy plus mean labeled-target cross-entropy,
    evaluated on already weakly augmented inputs. Empty batches contribute 0."""
    total = 0.0
    for x, y in ((x_source, y_source), (x_target_labeled, y_target_labeled)):
        y = _require_labels(y)
        if y.size == 0:
            continue
        probs = softmax(forward(state, x).logits)
        total += _ce_mean(probs, y)
    return total


@dataclass
class EvalReport:
    accuracy: float
    per_class_recall: list
    confusion: list            # confusion[truth][predicted]
    n: int


def evaluate(state: ModelState, x, y, classes: int) -> EvalReport:
    """Deterministic classification report on a labeled set."""
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise UsageError("cannot evaluate on an empty set")
    preds = np.argmax(forward(state, x).logits, axis=1)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for truth, pred in zip(y, preds):
        confusion[truth, pred] += 1
    row_sums = confusion.sum(axis=1)
    recall = np.where(row_sums > 0, np.diag(confusion) / np.maximum(row_sums, 1),
                      0.0)
    return EvalReport(
        accuracy=float((preds == y).mean()),
        per_class_recall=[float(r) for r in recall],
        confusion=confusion.tolist(),
        n=int(y.size),
    )


def pseudo_label_histogram(state: ModelState, bank: ConfidenceBank,
                           x_unlabeled, threshold: float, classes: int):
    """(counts of debiased argmax over all unlabeled inputs, confident share).

    Computed on the un-augmented inputs so the record is rng-free.
    """
    if x_unlabeled.shape[0] == 0:
        return [0] * classes, 0.0
    probs = debiased_prediction(forward(state, x_unlabeled).logits, bank)
    labels = np.argmax(probs, axis=1)
    hist = np.bincount(labels, minlength=classes)
    confident = float((probs.max(axis=1) >= threshold).mean())
    return [int(c) for c in hist], confident


@dataclass
class RunResult:
    best_iteration: int
    best_val_accuracy: float
    test_accuracy: float
    test_per_class_recall: list
    test_confusion: list
    records: list = field(default_factory=list)


def _rng_streams(trainer_seed: int, augment_seed: int) -> dict:
    def make(*key):
        return np.random.default_rng(np.random.SeedSequence(key))

    return {
        "init": make(trainer_seed, 0),
        "sampler": make(trainer_seed, 1),
        "negatives": make(trainer_seed, 2),
        "aug_source": make(trainer_seed, 3, augment_seed),
        "aug_labeled": make(trainer_seed, 4, augment_seed),
        "aug_weak": make(trainer_seed, 5, augment_seed),
        "aug_strong1": make(trainer_seed, 6, augment_seed),
        "aug_strong2": make(trainer_seed, 7, augment_seed),
    }


class MuVoTrainer:
    """Owns the model, banks, and rng streams for one training run."""

    def __init__(self, config, data: TrainingData):
        self.cfg = config
        self.data = data
        classes = config.data.classes
        if data.source.y.max() >= classes:
            raise InvalidConfigError(
                "dataset labels exceed the configured class count")
        self.rngs = _rng_streams(config.trainer.seed, config.augment.rng_seed)
        self.state = init_model(
            data.input_dim, config.model.hidden_dim, config.model.feature_dim,
            classes, config.model.activation, rng=self.rngs["init"])
        self.opt = init_optimizer(
            self.state, base_lr=config.model.base_lr,
            momentum=config.model.sgd_momentum, gamma=config.model.lr_gamma,
            beta=config.model.lr_beta)
        self.conf_bank = ConfidenceBank.create(
            classes, momentum=config.bank.momentum,
            debias_factor=config.debias.factor)
        # The same EMA momentum drives both the confidence bank and the
        # prototypes; the method uses a single coefficient for both.
        self.proto_bank = PrototypeBank.create(
            classes, config.model.feature_dim, momentum=config.bank.momentum)
        self.source_bank = SourceBank.create(classes, config.affinity.capacity)
        self.sampler = equal_sampler(
            len(data.source), len(data.target_labeled),
            data.target_unlabeled_x.shape[0], config.trainer.batch_size,
            self.rngs["sampler"])
        self.enabled = {name: name not in config.trainer.ablate
                        for name in ABLATABLE}
        self.iteration = 0

    # -- one iteration -----------------------------------------------------

    def step(self, t: int) -> dict:
        """Run iteration ``t`` (0-based); returns the step's loss components.

        Batch shapes are fixed by construction, so a validation error from
        the numeric layer mid-step can only mean overflow: it is re-raised
        as divergence.
        """
        try:
            return self._step(t)
        except InvalidInputError as exc:
            raise TrainingDivergedError(
                f"numerical failure at iteration {t}: {exc}") from exc

    def _step(self, t: int) -> dict:
        cfg = self.cfg
        tcfg = cfg.trainer
        warmup = tcfg.warmup_iters
        if not self.state.all_finite():
            raise TrainingDivergedError(
                f"non-finite parameters entering iteration {t}")

        dcl_on = self.enabled["dcl"]
        ncl_on = self.enabled["ncl"] and (
            tcfg.negative_gating == "always" or t >= warmup)
        con_on = self.enabled["con"]
        cda_on = self.enabled["cda"] and t >= warmup
        need_weak = dcl_on or ncl_on or con_on or cda_on
        need_s1 = dcl_on or con_on
        need_s2 = ncl_on or con_on

        idx_s, idx_tl, idx_tu = next(self.sampler)
        xs = weak_augment(self.data.source.x[idx_s], cfg.augment,
                          self.rngs["aug_source"])
        ys = self.data.source.y[idx_s]
        xtl = weak_augment(self.data.target_labeled.x[idx_tl], cfg.augment,
                           self.rngs["aug_labeled"])
        ytl = self.data.target_labeled.y[idx_tl]

        # Stage I: supervised learning on the weak views.
        cache_s = forward(self.state, xs)
        cache_tl = forward(self.state, xtl)
        probs_s = softmax(cache_s.logits)
        probs_tl = softmax(cache_tl.logits)
        l_sup = _ce_mean(probs_s, ys) + _ce_mean(probs_tl, ytl)
        dz_source = _ce_grad(probs_s, ys)
        dz_labeled = _ce_grad(probs_tl, ytl)

        comps = dict.fromkeys(LOSS_KEYS, 0.0)
        comps["sup"] = l_sup
        con_weight = ramp_weight(t, warmup, tcfg.consistency_weight)
        comps["con_weight"] = con_weight
        comps["n_confident"] = 0
        comps["n_admitted"] = 0

        grads = zero_grads(self.state)

        # Stage II: unsupervised learning on the unlabeled target batch.
        # The weak view is a gradient constant: its forward pass is kept only
        # to produce pseudo-labels, never backpropagated.
        pseudo = None
        cache_s1 = cache_s2 = None
        dz_s1 = dz_s2 = None
        if need_weak:
            x_unl = self.data.target_unlabeled_x[idx_tu]
            xw = weak_augment(x_unl, cfg.augment, self.rngs["aug_weak"])
            zw = forward(self.state, xw)
            pseudo = generate_pseudo_labels(
                zw.logits, self.conf_bank, cfg.debias.threshold,
                m=cfg.negative.m if ncl_on else None,
                rng=self.rngs["negatives"])
            pseudo_features = zw.features
            comps["n_confident"] = int(pseudo.mask.sum())

            if need_s1:
                xs1 = strong_augment(x_unl, cfg.augment, self.rngs["aug_strong1"])
                cache_s1 = forward(self.state, xs1)
                dz_s1 = np.zeros_like(cache_s1.logits)
            if need_s2:
                xs2 = strong_augment(x_unl, cfg.augment, self.rngs["aug_strong2"])
                cache_s2 = forward(self.state, xs2)
                dz_s2 = np.zeros_like(cache_s2.logits)

            if dcl_on:
                ps1_biased = biased_prediction(cache_s1.logits, self.conf_bank)
                l_dcl, g, _ = dcl_loss_batch(
                    pseudo.debiased_probs, ps1_biased, cfg.debias.threshold)
                comps["dcl"] = l_dcl
                dz_s1 += g
            if ncl_on:
                ps2 = softmax(cache_s2.logits)
                l_ncl, g = ncl_loss_batch(pseudo.negatives, ps2)
                comps["ncl"] = l_ncl
                dz_s2 += g
            if con_on:
                p1 = softmax(cache_s1.logits)
                p2 = softmax(cache_s2.logits)
                l_con, g1, g2 = consistency_loss_batch(p1, p2)
                comps["con"] = l_con
                dz_s1 += con_weight * g1
                dz_s2 += con_weight * g2

            # Bank statistics come from this step's predictions but only
            # influence the next step's redistribution.
            if dcl_on:
                stats = (pseudo.raw_probs if cfg.bank.use_raw_probs
                         else pseudo.debiased_probs)
                update_confidence_bank(self.conf_bank, stats,
                                       mode=cfg.bank.stat_mode)

        # Stage III: affinity learning after warmup.
        dfeat_source = None
        if cda_on:
            confident = pseudo.mask
            update_prototypes(self.proto_bank,
                              pseudo_features[confident],
                              pseudo.labels[confident])
            source_preds = np.argmax(probs_s, axis=1)
            comps["n_admitted"] = admit_batch(
                self.source_bank, self.proto_bank, cache_s.features,
                source_preds, ys)
            l_cda, l_ctr, l_clu, g_feat = cda_loss_batch(
                cache_s.features, ys, self.proto_bank, self.source_bank,
                cfg.affinity)
            comps["cda"], comps["ctr"], comps["clu"] = l_cda, l_ctr, l_clu
            dfeat_source = cfg.affinity.weight * g_feat

        total = (comps["sup"] + comps["dcl"] + comps["ncl"]
                 + con_weight * comps["con"]
                 + cfg.affinity.weight * comps["cda"])
        comps["total"] = total
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite total loss at iteration {t}", components=comps)

        accumulate_grads(grads, backward(self.state, cache_s, dz_source,
                                         dfeat_source))
        accumulate_grads(grads, backward(self.state, cache_tl, dz_labeled))
        if cache_s1 is not None:
            accumulate_grads(grads, backward(self.state, cache_s1, dz_s1))
        if cache_s2 is not None:
            accumulate_grads(grads, backward(self.state, cache_s2, dz_s2))

        if t == warmup and warmup > 0:
            refresh_schedule(self.opt)
        comps["lr"] = effective_lr(self.opt)
        sgd_step(self.state, self.opt, grads)
        self.iteration = t + 1
        return comps

    # -- evaluation and the full loop ---------------------------------------

    def _eval_record(self, iteration: int, window: dict) -> dict:
        cfg = self.cfg
        classes = cfg.data.classes
        val = evaluate(self.state, self.data.val.x, self.data.val.y, classes)
        hist, confident = pseudo_label_histogram(
            self.state, self.conf_bank, self.data.target_unlabeled_x,
            cfg.debias.threshold, classes)
        return {
            "iteration": iteration,
            "lr": window["lr"],
            "loss": {k: window[k] for k in LOSS_KEYS},
            "con_weight": window["con_weight"],
            "val_accuracy": val.accuracy,
            "val_per_class_recall": val.per_class_recall,
            "val_confusion": val.confusion,
            "pseudo_label_hist": hist,
            "confident_fraction": confident,
            "class_confidence": [float(v) for v in self.conf_bank.values],
            "prototypes_initialized": int(self.proto_bank.initialized.sum()),
            "queue_occupancy": self.source_bank.occupancy(),
        }

    def _snapshot(self):
        return (copy.deepcopy(self.state), copy.deepcopy(self.opt),
                copy.deepcopy(self.conf_bank), copy.deepcopy(self.proto_bank),
                copy.deepcopy(self.source_bank), self.iteration)

    def run(self, out_dir=None) -> RunResult:
        """Train for the configured iterations, evaluating periodically.

        When ``out_dir`` is given, writes metrics.jsonl (one JSON record per
        evaluation), summary.csv, result.json, and checkpoints. The metrics
        stream contains no wall-clock data, so identical (config, seed) runs
        produce byte-identical files.
        """
        cfg = self.cfg
        tcfg = cfg.trainer
        out = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")

        records = []
        best_acc, best_iter, best_snapshot = -1.0, 0, None
        window = dict.fromkeys((*LOSS_KEYS, "con_weight", "lr"), 0.0)
        window_steps = 0

        try:
            for t in range(tcfg.total_iters):
                comps = self.step(t)
                for k in window:
                    window[k] += comps[k]
                window_steps += 1
                if (t + 1) % tcfg.eval_interval == 0 or t + 1 == tcfg.total_iters:
                    means = {k: v / window_steps for k, v in window.items()}
                    record = self._eval_record(t + 1, means)
                    records.append(record)
                    if metrics_fh is not None:
                        metrics_fh.write(json.dumps(record) + "\n")
                    if record["val_accuracy"] > best_acc:
                        best_acc = record["val_accuracy"]
                        best_iter = t + 1
                        best_snapshot = self._snapshot()
                    window = dict.fromkeys(window, 0.0)
                    window_steps = 0
        finally:
            if metrics_fh is not None:
                metrics_fh.close()

        if best_snapshot is None:  # total_iters == 0
            best_snapshot = self._snapshot()
            best_iter = 0
            best_acc = float("nan")

        best_state = best_snapshot[0]
        test = evaluate(best_state, self.data.test.x, self.data.test.y,
                        cfg.data.classes)
        result = RunResult(
            best_iteration=best_iter,
            best_val_accuracy=best_acc,
            test_accuracy=test.accuracy,
            test_per_class_recall=test.per_class_recall,
            test_confusion=test.confusion,
            records=records,
        )

        if out is not None:
            if cfg.output.save_final:
                save_checkpoint(out / "checkpoint_final.json", self.state,
                                self.opt, self.conf_bank, self.proto_bank,
                                self.source_bank, self.iteration)
            if cfg.output.save_best:
                save_checkpoint(out / "checkpoint_best.json", *best_snapshot)
            with open(out / "summary.csv", "w", newline="",
                      encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(SUMMARY_COLUMNS)
                for rec in records:
                    writer.writerow([
                        rec["iteration"], repr(rec["lr"]),
                        repr(rec["loss"]["total"]), repr(rec["loss"]["sup"]),
                        repr(rec["loss"]["dcl"]), repr(rec["loss"]["ncl"]),
                        repr(rec["loss"]["con"]), repr(rec["loss"]["cda"]),
                        repr(rec["val_accuracy"]),
                        repr(rec["confident_fraction"]),
                    ])
            (out / "result.json").write_text(json.dumps({
                "best_iteration": result.best_iteration,
                "best_val_accuracy": result.best_val_accuracy,
                "test_accuracy": result.test_accuracy,
                "test_per_class_recall": result.test_per_class_recall,
                "test_confusion": result.test_confusion,
            }, indent=2) + "\n", encoding="utf-8")
        return result
