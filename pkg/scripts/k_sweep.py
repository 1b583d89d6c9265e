"""Tabulate unpopular-group Recall@N against K from a sweep CSV.

Accepts either ``reports/sweep_k.csv`` written by ``unkd sweep-k`` or the
``desk_metrics.csv`` written by ``scripts/desk_reproduction.py``.

    python scripts/k_sweep.py runs/latest/reports/sweep_k.csv
"""

import argparse
import csv
import sys
from collections import defaultdict


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("csv")
    parser.add_argument("--group", default="unpopular", choices=("overall", "popular", "unpopular"))
    args = parser.parse_args(argv)

    curves = defaultdict(dict)
    with open(args.csv) as fh:
        for row in csv.DictReader(fh):
            if row["K"] and row["metric"] == "recall" and row["group"] == args.group:
                curves[int(row["seed"])][int(row["K"])] = float(row["value"])
    if not curves:
        print("no sweep rows found", file=sys.stderr)
        return 1
    ks = sorted({k for c in curves.values() for k in c})
    print("seed " + " ".join(f"{'K=' + str(k):>8}" for k in ks) + "   peak")
    for seed, curve in sorted(curves.items()):
        peak = max(curve, key=lambda k: (curve[k], -k))
        print(f"{seed:>4} " + " ".join(f"{curve.get(k, float('nan')):8.4f}" for k in ks) + f"   K={peak}")
        later = [v for k, v in curve.items() if k >= 2]
        if 1 in curve and later:
            print(f"     max over K>=2 {'>' if max(later) > curve[1] else '<='} K=1")
    return 0


if __name__ == "__main__":
    sys.exit(main())
