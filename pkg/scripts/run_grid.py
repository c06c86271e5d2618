"""Run the method x parallelism x dyn grid and print a reduction table.

Produces the standard run directory (metrics.csv, series.csv, plans/,
manifest.json), then pivots metrics.csv into per-cell token-straggler
reductions of each method against the before_lb row with the same
pp/ep/dyn/tau/seed.
"""

import argparse
import csv
from pathlib import Path

from epsim.cli import run_experiment


def load_rows(out_dir):
    with open(Path(out_dir) / "metrics.csv", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def print_pivot(rows):
    base = {}
    for row in rows:
        if row["method"] == "before_lb":
            key = (row["pp"], row["ep"], row["dyn"], row["tau"], row["seed"])
            base[key] = float(row["token_straggler"])
    header = f"{'pp/ep':>6} {'dyn':>4} {'seed':>5} {'method':>16} {'straggler':>12} {'reduction':>10}"
    print(header)
    print("-" * len(header))
    ordered = sorted(
        rows, key=lambda r: (int(r["ep"]), int(r["dyn"]), int(r["seed"]), r["method"])
    )
    for row in ordered:
        key = (row["pp"], row["ep"], row["dyn"], row["tau"], row["seed"])
        value = float(row["token_straggler"])
        reduction = ""
        if row["method"] != "before_lb" and base.get(key):
            reduction = f"{100.0 * (1.0 - value / base[key]):6.1f}%"
        print(
            f"{row['pp'] + '/' + row['ep']:>6} {row['dyn']:>4} {row['seed']:>5} "
            f"{row['method']:>16} {value:12.1f} {reduction:>10}"
        )


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/grid.cfg")
    parser.add_argument("--out", default="runs/grid")
    parser.add_argument("--jobs", type=int, default=4)
    parser.add_argument("--overwrite", action="store_true")
    args = parser.parse_args()
    out = run_experiment(args.config, args.out, overwrite=args.overwrite, jobs=args.jobs)
    print(f"wrote {out}")
    print_pivot(load_rows(out))


if __name__ == "__main__":
    main()
