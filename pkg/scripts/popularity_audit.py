"""Popularity audit of every checkpoint in a CLI run directory.

For each model, prints the share of top-N slots taken by the popular half of
the item mass next to the share popular items have among held-out test
interactions (the "ideal" share), plus per-group recall.

    python scripts/popularity_audit.py runs/latest --n 10
"""

import argparse
import os
import sys

from unkd.backbone import NormalizedGraph, load_checkpoint
from unkd.dataset import load_dataset
from unkd.distill import partition_items
from unkd.evaluation import evaluate_model


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("run_dir")
    parser.add_argument("--n", type=int, default=10)
    args = parser.parse_args(argv)

    ds = load_dataset(os.path.join(args.run_dir, "data"))
    part = partition_items(ds.popularity, 2)
    print(f"{len(part.groups[0])} popular items hold {part.group_mass[0]} of {part.group_mass.sum()} "
          f"training interactions; {len(part.groups[1])} unpopular items hold the rest")
    ckpt_dir = os.path.join(args.run_dir, "checkpoints")
    graph = None
    print(f"{'model':>24} {'share':>7} {'ideal':>7} {'rec_pop':>8} {'rec_unpop':>9}")
    for name in sorted(os.listdir(ckpt_dir)):
        if not name.endswith(".ckpt"):
            continue
        model = load_checkpoint(os.path.join(ckpt_dir, name))
        if model.kind == "lightgcn":
            graph = graph or NormalizedGraph.from_dataset(ds)
            model.refresh(graph)
        r = evaluate_model(model, ds, part, n=args.n)
        print(f"{name[:-5]:>24} {r.share['popular']:7.3f} {r.ideal_share['popular']:7.3f} "
              f"{r.group_recall['popular']:8.4f} {r.group_recall['unpopular']:9.4f}")


if __name__ == "__main__":
    sys.exit(main())
