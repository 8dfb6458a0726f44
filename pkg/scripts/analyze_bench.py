#!/usr/bin/env python3
"""Summarise bench CSV files: per-experiment tables plus the trend checks each experiment is meant to show.

    python scripts/analyze_bench.py results/*.csv
"""

from __future__ import annotations

import argparse
import sys
from collections import defaultdict
from pathlib import Path

from obidos.bench import BenchRow, linear_fit, read_csv


def table(rows: list[BenchRow]) -> str:
    lines = [f"{'mode':<8}{'param':>7}{'meta B':>12}{'blob B':>14}{'reqs':>8}{'ms':>12}"]
    for r in sorted(rows, key=lambda r: (r.mode, r.param, r.run)):
        lines.append(f"{r.mode:<8}{r.param:>7}{r.metadata_bytes:>12}{r.blob_bytes:>14}{r.requests:>8}{r.elapsed_ms:>12.1f}")
    return "\n".join(lines)


def by_mode(rows: list[BenchRow]) -> dict[str, list[BenchRow]]:
    out: dict[str, list[BenchRow]] = defaultdict(list)
    for r in rows:
        out[r.mode].append(r)
    for v in out.values():
        v.sort(key=lambda r: r.param)
    return out


def trends(experiment: str, rows: list[BenchRow]) -> list[str]:
    modes = by_mode(rows)
    notes = []
    if experiment in ("vary-total-volume", "remote-load"):
        hybrid = modes.get("Hybrid", [])
        flat = len({(r.requests, r.metadata_bytes + r.blob_bytes) for r in hybrid}) == 1
        notes.append(f"hybrid traffic constant across corpora: {flat}")
        for mode in ("Eager", "Lazy"):
            if len(modes.get(mode, [])) > 1:
                xs = [r.param for r in modes[mode]]
                _, _, r2 = linear_fit(xs, [r.metadata_bytes + r.blob_bytes for r in modes[mode]])
                notes.append(f"{mode.lower()} bytes vs corpus size R^2 = {r2:.5f}")
    elif experiment == "vary-interest":
        pairs = zip(modes.get("Hybrid", []), modes.get("Lazy", []))
        for h, lz in pairs:
            notes.append(f"coverage {h.param}: hybrid/lazy metadata bytes = {h.metadata_bytes / lz.metadata_bytes:.3f}")
    elif experiment == "repeat-query":
        for mode, rs in modes.items():
            first = [r for r in rs if r.param == 1]
            later = [r for r in rs if r.param > 1]
            if first and later:
                ratio = max(r.elapsed_ms for r in later) / max(first[0].elapsed_ms, 1e-9)
                notes.append(f"{mode}: repeat requests {[r.requests for r in later]}, worst repeat/first time {ratio:.3f}")
    elif experiment == "share-volume":
        ids = {r.metadata_bytes for r in modes.get("IdOnly", [])}
        notes.append(f"IdOnly envelope sizes: {sorted(ids)}")
        full = modes.get("Full", [])
        if len(full) > 1:
            _, _, r2 = linear_fit([r.param for r in full], [r.metadata_bytes for r in full])
            notes.append(f"Full envelope vs shared series R^2 = {r2:.6f}")
        binary = {r.param: r.blob_bytes for r in modes.get("Binary", [])}
        worst = max((r.metadata_bytes / binary[r.param] for r in full if binary.get(r.param)), default=0.0)
        notes.append(f"largest envelope / binary volume = {worst:.5%}")
    return notes


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("csv", nargs="+", type=Path)
    args = parser.parse_args(argv)
    grouped: dict[str, list[BenchRow]] = defaultdict(list)
    for path in args.csv:
        for row in read_csv(path.read_text()):
            grouped[row.experiment].append(row)
    for experiment, rows in grouped.items():
        print(f"== {experiment} ({len(rows)} rows)")
        print(table(rows))
        for note in trends(experiment, rows):
            print(f"  - {note}")
        print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
