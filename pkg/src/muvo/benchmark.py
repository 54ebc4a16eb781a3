"""Multi-seed benchmark on the default synthetic two-domain task.

Runs paired training variants on identical per-seed datasets so the
comparisons (full method vs supervised-only baseline, full vs single-loss,
debiasing on vs off) are not confounded by data draws. Used both by the
acceptance suite and by scripts/run_benchmark.py.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import generate, kshot_split, training_data_from_dataset
from .exceptions import InvalidConfigError
from .trainer import MuVoTrainer

DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# Variant name -> config transformation.
VARIANTS = {
    "full": lambda cfg: cfg,
    "s+t": lambda cfg: cfg.replace_section(
        "trainer", ablate=("dcl", "ncl", "con", "cda")),
    "dcl_only": lambda cfg: cfg.replace_section(
        "trainer", ablate=("ncl", "con", "cda")),
    "no_debias": lambda cfg: cfg.replace_section("debias", factor=0.0),
}


def variant_config(base: ExperimentConfig, name: str,
                   seed: int) -> ExperimentConfig:
    if name not in VARIANTS:
        raise InvalidConfigError(f"unknown benchmark variant '{name}'")
    cfg = VARIANTS[name](base)
    cfg = cfg.replace_section("trainer", seed=seed)
    cfg = cfg.replace_section("data", seed=base.data.seed + seed)
    return cfg


def run_benchmark(seeds=DEFAULT_SEEDS, variants=tuple(VARIANTS),
                  base_config: ExperimentConfig | None = None,
                  verbose: bool = False) -> dict:
    """Train every variant on every seed; returns per-variant summaries.

    Result layout: {variant: {"test_accuracies": [...], "recall_stds": [...],
    "mean_accuracy": float, "mean_recall_std": float, "elapsed_seconds": float}}.
    """
    base = base_config if base_config is not None else ExperimentConfig()
    results = {name: {"test_accuracies": [], "recall_stds": [],
                      "elapsed_seconds": 0.0} for name in variants}
    for seed in seeds:
        # One dataset per seed, shared by all variants (paired comparison).
        spec = dataclasses.replace(base.data, seed=base.data.seed + seed)
        dataset = generate(spec)
        split = kshot_split(dataset.target_train, spec.shots, spec.seed)
        data = training_data_from_dataset(dataset, split)
        for name in variants:
            cfg = variant_config(base, name, seed)
            start = time.perf_counter()
            result = MuVoTrainer(cfg, data).run()
            elapsed = time.perf_counter() - start
            entry = results[name]
            entry["test_accuracies"].append(result.test_accuracy)
            entry["recall_stds"].append(
                float(np.std(result.test_per_class_recall)))
            entry["elapsed_seconds"] += elapsed
            if verbose:
                print(f"seed {seed} {name:>10}: "
                      f"test acc {result.test_accuracy:.4f} "
                      f"recall std {entry['recall_stds'][-1]:.4f} "
                      f"({elapsed:.1f}s)")
    for entry in results.values():
        entry["mean_accuracy"] = float(np.mean(entry["test_accuracies"]))
        entry["mean_recall_std"] = float(np.mean(entry["recall_stds"]))
    return results


def format_results(results: dict) -> str:
    lines = [f"{'variant':<12}{'mean acc':>10}{'recall std':>12}{'time':>10}"]
    for name, entry in results.items():
        lines.append(f"{name:<12}{entry['mean_accuracy']:>10.4f}"
                     f"{entry['mean_recall_std']:>12.4f}"
                     f"{entry['elapsed_seconds']:>9.1f}s")
    return "\n".join(lines)


def save_results(results: dict, path) -> None:
    Path(path).write_text(json.dumps(results, indent=2) + "\n",
                          encoding="utf-8")
