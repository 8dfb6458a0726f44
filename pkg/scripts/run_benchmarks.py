#!/usr/bin/env python3
"""Run every bench experiment and write one CSV per experiment.

    python scripts/run_benchmarks.py --out results --runs 3
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from obidos.bench import EXPERIMENTS, BenchConfig, run_experiment, write_csv
from obidos.source import RemoteProfile


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("results"))
    parser.add_argument("--workdir", type=Path, default=Path("bench-work"))
    parser.add_argument("--runs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--image-size", type=int, default=8 * 1024)
    parser.add_argument("--request-latency", type=float, default=0.020)
    parser.add_argument("--byte-latency", type=float, default=10e-9)
    parser.add_argument("--only", action="append", choices=sorted(EXPERIMENTS))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = BenchConfig(args.workdir, seed=args.seed, image_size_bytes=args.image_size, runs=args.runs,
                      remote=RemoteProfile(args.request_latency, args.byte_latency))
    args.out.mkdir(parents=True, exist_ok=True)
    for name in args.only or sorted(EXPERIMENTS):
        rows = run_experiment(name, cfg)
        path = args.out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            write_csv(rows, fh)
        logging.info("wrote %s (%d rows)", path, len(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
