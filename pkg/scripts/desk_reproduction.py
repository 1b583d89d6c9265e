"""Directional desk reproduction: teacher / base student / CD / UnKD and the K sweep.

    python scripts/desk_reproduction.py --config configs/desk_ml1m.cfg --out runs/desk_ml1m
    python scripts/desk_reproduction.py --config configs/desk_ml100k.cfg --dataset /path/u.data \
        --out runs/desk_ml100k

Checkpoints are cached in ``<out>/checkpoints``, so an interrupted run resumes
where it stopped. Per-seed metrics land in ``<out>/desk_metrics.csv``.
"""

import argparse
import logging
import os
import sys

from unkd.config import load_config
from unkd.desk import find_ml1m, run_protocol, tally


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/desk_ml1m.cfg")
    parser.add_argument("--dataset", help="ratings file; defaults to the config's dataset_path")
    parser.add_argument("--out", default="runs/desk_ml1m")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--user-fraction", type=float, help="user subsample, e.g. 0.5 for the fallback")
    parser.add_argument("--no-sweep", action="store_true", help="only train UnKD at the configured K")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = {"user_fraction": args.user_fraction}
    dataset = args.dataset
    if dataset is None and "ml1m" in os.path.basename(args.config):
        dataset = find_ml1m()
    if dataset:
        overrides["dataset_path"] = dataset
    cfg = load_config(args.config, **overrides)
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_protocol(cfg, seeds=seeds, sweep=not args.no_sweep, out_dir=args.out)

    print(f"{'seed':>4} {'model':>8} {'recall':>8} {'ndcg':>8} {'pop':>8} {'unpop':>8} {'share':>6}")
    for r in results:
        for name, rep in (("teacher", r.teacher), ("base", r.base), ("cd", r.cd), (f"unkd{cfg.k}", r.unkd)):
            print(f"{r.seed:>4} {name:>8} {rep.recall:8.4f} {rep.ndcg:8.4f} {rep.group_recall['popular']:8.4f} "
                  f"{rep.group_recall['unpopular']:8.4f} {rep.share['popular']:6.3f}")
        if r.sweep:
            curve = " ".join(f"K{k}={rep.group_recall['unpopular']:.4f}" for k, rep in sorted(r.sweep.items()))
            print(f"{r.seed:>4} sweep unpopular recall: {curve}")
    print()
    for name, (passed, total, ok) in tally(results, quorum=(len(results) + 2) // 2).items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {passed}/{total} seeds")


if __name__ == "__main__":
    sys.exit(main())
