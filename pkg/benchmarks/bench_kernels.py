"""Compare the compiled and pure-Python kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--csv PATH]
"""
from __future__ import annotations

import argparse
import csv

from reid3d import _kernels
from reid3d.bench import format_rows, run_benchmarks


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None, help="optional CSV output path")
    args = ap.parse_args(argv)
    print(f"active backend: {_kernels.BACKEND}; available: {sorted(_kernels.available_backends())}")
    rows = run_benchmarks(repeats=args.repeats, seed=args.seed)
    print(format_rows(rows))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "backend", "size", "seconds", "speedup"])
            for r in rows:
                w.writerow([r.kernel, r.backend, r.size, f"{r.seconds:.6g}",
                            "" if r.speedup is None else f"{r.speedup:.3f}"])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
