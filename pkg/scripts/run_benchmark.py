#!/usr/bin/env python3
"""Run the multi-seed synthetic benchmark and print the variant table.

Example:
    python scripts/run_benchmark.py --seeds 0 1 2 3 4 --out benchmark.json
"""

import argparse

from muvo.benchmark import (DEFAULT_SEEDS, VARIANTS, format_results,
                            run_benchmark, save_results)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+",
                        default=list(DEFAULT_SEEDS))
    parser.add_argument("--variants", nargs="+", default=list(VARIANTS),
                        choices=list(VARIANTS))
    parser.add_argument("--out", default=None, help="write results JSON here")
    args = parser.parse_args()

    results = run_benchmark(seeds=tuple(args.seeds),
                            variants=tuple(args.variants), verbose=True)
    print()
    print(format_results(results))
    if args.out:
        save_results(results, args.out)
        print(f"results written to {args.out}")


if __name__ == "__main__":
    main()
