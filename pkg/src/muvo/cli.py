"""Command-line entry point.

Subcommands: ``generate`` (synthesize a dataset directory), ``train`` (run
the training loop on a generated dataset), ``gradcheck`` (finite-difference
validation of all loss gradients), ``inspect`` (dump checkpoint state), and
``evaluate`` (score a checkpoint on a dataset split).

Exit codes: 0 success, 1 validation error, 2 runtime/divergence error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, write_resolved_config
from .data import (SPLIT_FILES, generate, kshot_split, load_dataset_dir,
                   load_split_csv, write_dataset_csvs)
from .exceptions import (DegenerateInputError, InvalidConfigError,
                         InvalidInputError, TrainingDivergedError, UsageError)
from .gradcheck import format_report, run_gradcheck
from .model import load_checkpoint
from .trainer import MuVoTrainer, evaluate

VALIDATION_ERRORS = (InvalidConfigError, InvalidInputError,
                     DegenerateInputError, UsageError)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def code_fingerprint() -> str:
    """Content hash of this package's source plus the version string."""
    digest = hashlib.sha256(__version__.encode())
    pkg = Path(__file__).parent
    for src in sorted(pkg.glob("*.py")):
        digest.update(src.name.encode())
        digest.update(src.read_bytes())
    return digest.hexdigest()


def cmd_generate(args) -> int:
    config = load_config(args.config)
    spec = config.data
    dataset = generate(spec)
    split = kshot_split(dataset.target_train, spec.shots, spec.seed)
    out = Path(args.out)
    paths = write_dataset_csvs(dataset, split, out)

    files = {}
    for path in paths:
        x, y = load_split_csv(path)
        files[path.name] = {
            "sha256": _sha256(path),
            "rows": int(x.shape[0]),
            "labeled_rows": int((y >= 0).sum()),
        }
    manifest = {
        "spec": dataclasses.asdict(spec),
        "seed": spec.seed,
        "labeled_target_rows": files["target_train.csv"]["labeled_rows"],
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                       encoding="utf-8")
    print(f"wrote {len(paths)} split files to {out}")
    print(f"labeled target rows: {manifest['labeled_target_rows']}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.ablate:
        targets = tuple(s.strip() for s in args.ablate.split(",") if s.strip())
        config = config.replace_section("trainer", ablate=targets)
    if args.iters is not None:
        config = config.replace_section("trainer", total_iters=args.iters,
                                        warmup_iters=min(args.iters,
                                                         config.trainer.warmup_iters))
    if args.seed is not None:
        config = config.replace_section("trainer", seed=args.seed)

    data_dir = Path(args.data)
    data = load_dataset_dir(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out / "config_resolved.json")
    manifest = {
        "code_version": __version__,
        "code_fingerprint": code_fingerprint(),
        "data_dir": str(data_dir),
        "dataset_hashes": {name: _sha256(data_dir / name)
                           for name in SPLIT_FILES},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")

    trainer = MuVoTrainer(config, data)
    result = trainer.run(out)
    print(f"best val accuracy {result.best_val_accuracy:.4f} "
          f"at iteration {result.best_iteration}")
    print(f"test accuracy {result.test_accuracy:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        load_config(args.config)  # validate only; the check net is fixed
    report = run_gradcheck(seed=args.seed)
    print(format_report(report))
    if not report.all_passed:
        failed = [r.name for r in report.rows if not r.passed]
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_inspect(args) -> int:
    state, opt, conf, protos, source, iteration = load_checkpoint(args.checkpoint)
    print(f"iteration={iteration}")
    print(f"optimizer_step={opt.step_count}")
    print(f"classes={state.classes}")
    print(f"feature_dim={state.feature_dim}")
    for c, v in enumerate(conf.values):
        print(f"confidence_{c}={float(v)!r}")
    norms = np.linalg.norm(protos.values, axis=1)
    for c in range(state.classes):
        initialized = bool(protos.initialized[c])
        print(f"prototype_initialized_{c}={initialized}")
        print(f"prototype_norm_{c}={float(norms[c])!r}")
    for c, occ in enumerate(source.occupancy()):
        print(f"queue_len_{c}={occ}")
    return 0


def cmd_evaluate(args) -> int:
    state, *_ = load_checkpoint(args.checkpoint)
    data = load_dataset_dir(args.data)
    split = {"val": data.val, "test": data.test}.get(args.split)
    if split is None:
        raise InvalidConfigError("split must be 'val' or 'test'")
    report = evaluate(state, split.x, split.y, state.classes)
    print(f"split={args.split}")
    print(f"n={report.n}")
    print(f"accuracy={report.accuracy!r}")
    for c, r in enumerate(report.per_class_recall):
        print(f"recall_{c}={r!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="muvo",
        description="Multi-view consistency training for semi-supervised "
                    "domain adaptation on synthetic two-domain tasks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset directory")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--ablate", default=None,
                   help="comma list from {dcl,ncl,con,cda} to disable")
    p.add_argument("--iters", type=int, default=None,
                   help="override trainer.total_iters (smoke runs)")
    p.add_argument("--seed", type=int, default=None,
                   help="override trainer.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all loss gradients")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump checkpoint state as key=value lines")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        for name, value in exc.components.items():
            print(f"  {name}={value}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
