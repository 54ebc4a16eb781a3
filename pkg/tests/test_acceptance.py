"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The multi-seed benchmark (criteria 7 and 8) runs once in a session fixture;
everything else is self-contained. Run with ``pytest tests/test_acceptance.py
-v -s`` to see the per-criterion lines.
"""

import itertools
import json
import time

import numpy as np
import pytest
import scipy.stats

from muvo.affinity import (AffinityConfig, PrototypeBank, SourceBank,
                           cda_loss, clu_loss, ctr_loss, try_admit)
from muvo.benchmark import run_benchmark
from muvo.config import ExperimentConfig
from muvo.data import generate, kshot_split, training_data_from_dataset
from muvo.gradcheck import format_report, run_gradcheck
from muvo.numerics import ema_update, softmax
from muvo.pseudolabel import (ConfidenceBank, consistency_loss, dcl_loss,
                              debiased_prediction, ncl_loss,
                              sample_negative_labels)
from muvo.trainer import MuVoTrainer


def report(criterion, ok, detail):
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


# ---------------------------------------------------------------------------
# shared benchmark runs (criteria 7 and 8)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def benchmark_results():
    start = time.perf_counter()
    results = run_benchmark(seeds=(0, 1, 2, 3, 4),
                            variants=("full", "s+t", "dcl_only", "no_debias"))
    results["_wall_seconds"] = time.perf_counter() - start
    return results


def tiny_config(seed=0):
    cfg = ExperimentConfig()
    cfg = cfg.replace_section(
        "data", classes=4, input_dim=6, source_per_class=30,
        target_per_class=30, val_per_class=8, test_per_class=8, shots=3,
        similar_pairs=1, seed=17)
    return cfg.replace_section(
        "trainer", total_iters=60, warmup_iters=20, batch_size=8,
        eval_interval=20, seed=seed)


def tiny_data(cfg):
    dataset = generate(cfg.data)
    split = kshot_split(dataset.target_train, cfg.data.shots, cfg.data.seed)
    return training_data_from_dataset(dataset, split)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    result = run_gradcheck(seed=0)  # net 4 -> 8 -> 5, C=3, batch 6, eps 1e-5
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in result.rows)
    ok = result.all_passed and len(result.rows) == 7 and elapsed < 60.0
    assert report(1, ok, f"7 gradients, max rel err {worst:.2e} "
                         f"(tol 1e-4), {elapsed:.1f}s (< 60s)"), \
        format_report(result)


def test_criterion_2_debias_algebra():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        classes = int(rng.integers(2, 9))
        z = rng.normal(scale=3.0, size=classes)
        theta = rng.uniform(0.05, 1.0, size=classes)
        factor = float(rng.uniform(0.0, 2.0))
        bank = ConfidenceBank(values=theta, debias_factor=factor)
        out = debiased_prediction(z, bank)
        p = softmax(z)
        for a, b in ((0, classes - 1), (1 % classes, 0)):
            if a == b:
                continue
            lhs = out[a] / out[b]
            rhs = (p[a] / p[b]) * (theta[b] / theta[a]) ** factor
            worst = max(worst, abs(lhs - rhs) / abs(rhs))
        # argmax invariance under a uniform bank, exact
        c = float(rng.uniform(0.01, 1.0))
        uniform = ConfidenceBank(values=np.full(classes, c),
                                 debias_factor=factor)
        assert np.argmax(debiased_prediction(z, uniform)) == np.argmax(p)
    ok = worst < 1e-9
    assert report(2, ok, f"ratio identity worst rel err {worst:.2e} "
                         f"(tol 1e-9) over 1000 instances; "
                         f"uniform-bank argmax invariance exact")


def test_criterion_3_negative_sampling_statistics():
    classes, m, draws = 10, 3, 100_000
    rng = np.random.default_rng(2024)
    probs = np.full(classes, 0.05)
    probs[4] = 1.0 - 0.05 * (classes - 1)  # argmax at class 4
    counts = {}
    for _ in range(draws):
        out = sample_negative_labels(probs, m, rng)
        assert out[4] == 0.0
        key = tuple(np.flatnonzero(out))
        counts[key] = counts.get(key, 0) + 1
    subsets = list(itertools.combinations(
        [c for c in range(classes) if c != 4], m))
    observed = np.array([counts.get(s, 0) for s in subsets])
    assert observed.sum() == draws
    _, pvalue = scipy.stats.chisquare(observed)
    ok = pvalue >= 0.01
    assert report(3, ok, f"argmax never drawn in {draws} draws; "
                         f"chi-square over {len(subsets)} 3-subsets "
                         f"p={pvalue:.3f} (>= 0.01)")


def test_criterion_4_bank_and_queue_oracles():
    # EMA vs closed form, loop oracle, 1e-12
    worst_ema = 0.0
    for lam, steps in ((0.999, 10_000), (0.9, 500), (0.5, 100), (0.0, 10)):
        value = 1.0
        target = 0.8
        for _ in range(steps):
            value = ema_update(value, target, lam)
        closed = target + lam ** steps * (1.0 - target)
        worst_ema = max(worst_ema, abs(value - closed))
    ok_ema = worst_ema < 1e-12

    # FIFO queue vs naive list oracle over 1e4 random admissions
    rng = np.random.default_rng(7)
    classes, capacity = 5, 7
    bank = SourceBank.create(classes, capacity)
    naive = [[] for _ in range(classes)]
    ok_fifo = True
    for _ in range(10_000):
        c = int(rng.integers(0, classes))
        f = rng.normal(size=3)
        bank.admit(c, f)
        naive[c].append(f.copy())
        if len(naive[c]) > capacity:
            del naive[c][0]
        if bank.occupancy() != [len(q) for q in naive]:
            ok_fifo = False
            break
        if not all(np.array_equal(a, b)
                   for a, b in zip(bank.queues[c], naive[c])):
            ok_fifo = False
            break

    # admission iff nearest prototype, prediction, and truth all agree
    protos = PrototypeBank(values=rng.normal(size=(classes, 3)),
                           initialized=np.ones(classes, dtype=bool),
                           momentum=0.999)
    norms = np.linalg.norm(protos.values, axis=1)
    ok_admit = True
    sink = SourceBank.create(classes, capacity=4)
    for _ in range(10_000):
        f = rng.normal(size=3)
        predicted = int(rng.integers(0, classes))
        truth = int(rng.integers(0, classes))
        sims = protos.values @ f / (norms * np.linalg.norm(f))
        expected = int(np.argmax(sims)) == predicted == truth
        if try_admit(sink, protos, f, predicted, truth) != expected:
            ok_admit = False
            break

    ok = ok_ema and ok_fifo and ok_admit
    assert report(4, ok, f"EMA closed-form err {worst_ema:.1e} (tol 1e-12); "
                         f"FIFO vs list oracle over 1e4 admissions: "
                         f"{'ok' if ok_fifo else 'MISMATCH'}; "
                         f"triple-agreement admission over 1e4 triples: "
                         f"{'ok' if ok_admit else 'MISMATCH'}")


def test_criterion_5_closed_form_loss_values():
    checks = []

    loss, passed = dcl_loss([0.96, 0.04], [0.5, 0.5], threshold=0.95)
    checks.append(("dcl ln2", loss, 0.6931471805599453))
    assert passed

    checks.append(("ncl uniform", ncl_loss([0, 1, 1, 0.0], np.full(4, 0.25)),
                   0.5753641449035618))
    checks.append(("con maximal", consistency_loss([1.0, 0.0], [0.0, 1.0]),
                   2.0))
    checks.append(("con small", consistency_loss([0.6, 0.4], [0.5, 0.5]),
                   0.02))

    protos = PrototypeBank(values=np.eye(3),
                           initialized=np.ones(3, dtype=bool), momentum=0.999)
    cfg = AffinityConfig(tau=1.0)
    f = np.array([1.0, 0.0, 0.0])
    checks.append(("ctr orthogonal", ctr_loss(f, 0, protos, cfg),
                   0.5514447139320511))

    bank = SourceBank.create(3, 4)
    bank.admit(0, np.array([1.0, 0.0, 0.0]))
    bank.admit(0, np.array([0.0, 1.0, 0.0]))
    checks.append(("clu half", clu_loss(f, 0, bank), 0.5))
    checks.append(("cda sum", cda_loss(f, 0, protos, bank, cfg),
                   1.0514447139320511))

    worst = max(abs(value - expected) for _, value, expected in checks)
    ok = worst < 1e-6
    assert report(5, ok, f"{len(checks)} closed-form values, worst abs err "
                         f"{worst:.2e} (tol 1e-6)")


def test_criterion_6_reduction_to_baseline(tmp_path):
    # ablating every unlabeled loss must reproduce the supervised-only
    # baseline bit for bit, with the unlabeled machinery provably inert
    baseline_cfg = tiny_config().replace_section(
        "trainer", total_iters=60, warmup_iters=20, batch_size=8,
        eval_interval=20, seed=0, ablate=("dcl", "ncl", "con", "cda"))
    data = tiny_data(baseline_cfg)

    trainer_a = MuVoTrainer(baseline_cfg, data)
    trainer_a.run(tmp_path / "a")

    # same ablation reached through the full config + replace route
    cfg_b = tiny_config(seed=0).replace_section(
        "trainer", total_iters=60, warmup_iters=20, batch_size=8,
        eval_interval=20, seed=0,
        ablate=("dcl", "ncl", "con", "cda"))
    trainer_b = MuVoTrainer(cfg_b, tiny_data(cfg_b))
    trainer_b.run(tmp_path / "b")

    bytes_equal = (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "b" / "metrics.jsonl").read_bytes()

    records = [json.loads(line) for line in
               (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    losses_inert = all(rec["loss"][k] == 0.0 for rec in records
                       for k in ("dcl", "ncl", "con", "cda"))
    banks_untouched = (
        np.all(trainer_a.conf_bank.values == 1.0)
        and not trainer_a.proto_bank.initialized.any()
        and trainer_a.source_bank.occupancy() == [0] * 4)
    ok = bytes_equal and losses_inert and banks_untouched
    assert report(6, ok, "ablated run == supervised-only baseline "
                         f"(byte-identical metrics: {bytes_equal}; "
                         f"unlabeled losses all zero: {losses_inert}; "
                         f"banks untouched: {banks_untouched})")


def test_criterion_7_synthetic_benchmark(benchmark_results):
    res = benchmark_results
    full = res["full"]["mean_accuracy"]
    baseline = res["s+t"]["mean_accuracy"]
    dcl_only = res["dcl_only"]["mean_accuracy"]
    runtime = (res["full"]["elapsed_seconds"]
               + res["s+t"]["elapsed_seconds"]
               + res["dcl_only"]["elapsed_seconds"])
    ok = (full >= baseline + 0.05) and (full >= dcl_only) and runtime < 600
    assert report(7, ok, f"full {full:.4f} vs s+t {baseline:.4f} "
                         f"(margin {full - baseline:+.4f}, need >= +0.05); "
                         f"full vs dcl-only {full - dcl_only:+.4f} (need >= 0); "
                         f"runtime {runtime:.0f}s (< 600s), 5 seeds")


def test_criterion_8_bias_reduction(benchmark_results):
    res = benchmark_results
    with_debias = res["full"]["mean_recall_std"]
    without = res["no_debias"]["mean_recall_std"]
    ok = with_debias <= without
    assert report(8, ok, f"per-class recall std {with_debias:.4f} with "
                         f"debiasing <= {without:.4f} without, "
                         f"mean over 5 seeds")


def test_criterion_9_determinism(tmp_path):
    cfg = tiny_config(seed=3)
    MuVoTrainer(cfg, tiny_data(cfg)).run(tmp_path / "run1")
    MuVoTrainer(cfg, tiny_data(cfg)).run(tmp_path / "run2")
    pairs = [(tmp_path / "run1" / name, tmp_path / "run2" / name)
             for name in ("metrics.jsonl", "summary.csv", "result.json")]
    ok = all(a.read_bytes() == b.read_bytes() for a, b in pairs)
    assert report(9, ok, "two identical (config, seed) runs produced "
                         "byte-identical metrics streams")
