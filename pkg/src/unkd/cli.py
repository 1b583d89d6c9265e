"""Command-line pipeline.

Run directory layout (``--out``)::

    config.resolved     the fully resolved configuration
    data/               prepared dataset archive
    checkpoints/        teacher.ckpt, student_<method>.ckpt
    logs/               per-model training logs and distillation plan dumps
    reports/            metric CSVs
    STALE               present only if the last failing command left partial artifacts
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time

from . import causal
from .backbone import NormalizedGraph, BackboneSpec, load_checkpoint, save_checkpoint, LIGHTGCN
from .config import ExperimentConfig, ConfigError, load_config, serialize_config, METHODS
from .dataset import (load_dataset, load_interactions, filter_min_interactions, save_dataset,
                      split_per_user, subsample_users)
from .distill import (PairDistiller, RankDistiller, build_plan, cd_baseline_plan, dump_plan,
                      partition_items, single_group)
from .evaluation import REPORT_COLUMNS, evaluate_model, report_rows, write_report_csv
from .trainer import TrainConfig, fit, write_training_log

logger = logging.getLogger("unkd")

COMMANDS = ("prepare", "train-teacher", "train-student-base", "distill", "evaluate",
            "sweep-k", "lemma-check", "pipeline")
THREADS_ENV = "UNKD_NUM_THREADS"


class Run:
    """Paths and shared state of one run directory."""

    def __init__(self, cfg: ExperimentConfig, out: str):
        self.cfg = cfg
        self.out = out
        for sub in ("checkpoints", "logs", "reports"):
            os.makedirs(os.path.join(out, sub), exist_ok=True)
        with open(os.path.join(out, "config.resolved"), "w", newline="\n") as fh:
            fh.write(serialize_config(cfg))
        self._dataset = None
        self._graph = None

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    @property
    def dataset(self):
        if self._dataset is None:
            if not os.path.exists(self.path("data", "meta.tsv")):
                raise FileNotFoundError(f"{self.path('data')} missing; run `prepare` first")
            self._dataset = load_dataset(self.path("data"))
        return self._dataset

    @property
    def graph(self):
        if self.cfg.backbone != LIGHTGCN:
            return None
        if self._graph is None:
            self._graph = NormalizedGraph.from_dataset(self.dataset)
        return self._graph

    def checkpoint(self, name: str) -> str:
        return self.path("checkpoints", f"{name}.ckpt")

    def load_model(self, name: str):
        path = self.checkpoint(name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} missing")
        return load_checkpoint(path, graph=self.graph)


def _backbone(cfg: ExperimentConfig, dim: int) -> BackboneSpec:
    return BackboneSpec(kind=cfg.backbone, dim=dim, layers=cfg.lightgcn_layers, init_scale=cfg.init_scale)


def _train_config(cfg: ExperimentConfig, lr: float, l2: float) -> TrainConfig:
    return TrainConfig(learning_rate=lr, l2_coeff=l2, batch_size=cfg.batch_size,
                       max_epochs=cfg.max_epochs, patience_epochs=cfg.patience,
                       seed=cfg.seed, eval_n=cfg.eval_n)


def eval_partition(dataset):
    return partition_items(dataset.popularity, 2)


def _evaluate_rows(run: Run, model, method: str) -> list[dict]:
    cfg = run.cfg
    report = evaluate_model(model, run.dataset, eval_partition(run.dataset), n=cfg.eval_n)
    return report_rows(report, cfg.dataset_name, cfg.backbone, method, cfg.seed)


def cmd_prepare(run: Run) -> None:
    cfg = run.cfg
    log = load_interactions(cfg.dataset_path, cfg.delimiter, cfg.rating_threshold)
    log = filter_min_interactions(log, cfg.min_interactions)
    if cfg.user_fraction < 1.0:
        log = subsample_users(log, cfg.user_fraction, seed=cfg.split_seed)
    ds = split_per_user(log, cfg.test_frac, cfg.valid_frac, seed=cfg.split_seed)
    save_dataset(ds, run.path("data"))
    logger.info("prepared %d users, %d items, %d training interactions",
                ds.num_users, ds.num_items, ds.num_train)


def _train(run: Run, name: str, dim: int, lr: float, l2: float, distiller=None, seed_offset: int = 0):
    cfg = run.cfg
    ds = run.dataset
    model = _backbone(cfg, dim).build(ds, seed=cfg.seed + seed_offset)
    if run.graph is not None:
        model.refresh(run.graph)
    best, log = fit(model, ds, _train_config(cfg, lr, l2), distiller=distiller)
    save_checkpoint(best, run.checkpoint(name))
    write_training_log(log, run.path("logs", f"{name}.csv"))
    return best


def cmd_train_teacher(run: Run) -> None:
    cfg = run.cfg
    teacher = _train(run, "teacher", cfg.teacher_dim, cfg.teacher_lr, cfg.teacher_l2)
    write_report_csv(_evaluate_rows(run, teacher, "teacher"), run.path("reports", "metrics_teacher.csv"))


def make_distiller(run: Run, method: str, k: int):
    cfg = run.cfg
    ds = run.dataset
    teacher = run.load_model("teacher")
    if method == "unkd":
        plan = build_plan(teacher, ds, partition_items(ds.popularity, k), cfg.soft_labels, cfg.mu)
    elif method == "cd":
        plan = cd_baseline_plan(teacher, ds, cfg.soft_labels, cfg.mu)
    elif method == "rd":
        plan = build_plan(teacher, ds, single_group(ds.num_items), cfg.rd_top_n, cfg.mu)
    else:
        raise ConfigError(f"no distiller for method {method!r}")
    tag = f"{method}_k{k}" if method == "unkd" else method
    dump_plan(plan, run.path("logs", f"plan_{tag}.tsv"))
    if method == "rd":
        return RankDistiller(plan, cfg.lam, seed=cfg.seed)
    return PairDistiller(plan, cfg.lam, seed=cfg.seed, pairs_per_group=cfg.pairs_per_group or None,
                         resample=cfg.resample_pairs)


def student_name(method: str) -> str:
    return f"student_{method}"


def cmd_train_student_base(run: Run) -> None:
    cfg = run.cfg
    student = _train(run, student_name("none"), cfg.student_dim, cfg.student_lr, cfg.student_l2, seed_offset=1)
    write_report_csv(_evaluate_rows(run, student, "none"), run.path("reports", "metrics_none.csv"))


def cmd_distill(run: Run, k: int | None = None, name: str | None = None) -> list[dict]:
    cfg = run.cfg
    method = cfg.method
    if method == "none":
        cmd_train_student_base(run)
        return []
    k = cfg.k if k is None else k
    distiller = make_distiller(run, method, k)
    name = name or student_name(method)
    student = _train(run, name, cfg.student_dim, cfg.student_lr, cfg.student_l2, distiller=distiller, seed_offset=1)
    rows = _evaluate_rows(run, student, method)
    write_report_csv(rows, run.path("reports", f"metrics_{name.removeprefix('student_')}.csv"))
    return rows


def cmd_evaluate(run: Run) -> None:
    rows = []
    for label, name in [("teacher", "teacher")] + [(m, student_name(m)) for m in METHODS]:
        if os.path.exists(run.checkpoint(name)):
            rows.extend(_evaluate_rows(run, run.load_model(name), label))
    if not rows:
        raise FileNotFoundError("no checkpoints to evaluate")
    write_report_csv(rows, run.path("reports", "metrics.csv"))


def cmd_sweep_k(run: Run) -> None:
    cfg = run.cfg
    if not os.path.exists(run.checkpoint("teacher")):
        raise FileNotFoundError("teacher checkpoint missing; run `train-teacher` first")
    run.cfg = dataclasses.replace(cfg, method="unkd")
    rows = []
    for k in cfg.sweep_k:
        for row in cmd_distill(run, k=k, name=f"sweep_unkd_k{k}"):
            rows.append({"K": k, **row})
    run.cfg = cfg
    write_report_csv(rows, run.path("reports", "sweep_k.csv"), columns=("K",) + REPORT_COLUMNS)


def cmd_lemma_check(run: Run) -> bool:
    cfg = run.cfg
    rows = []
    failures = 0
    for gamma in cfg.lemma_gammas:
        for s in range(cfg.lemma_models):
            model = causal.generate(cfg.lemma_users, cfg.lemma_items, gamma=gamma, seed=cfg.seed + s)
            strata = causal.equal_popularity_strata(model)
            total, ok = causal.lemma1_check_all(model, strata)
            failures += total - ok
            rows.append({"gamma": gamma, "model_seed": cfg.seed + s, "strata": len(strata),
                         "checks": total, "passed": ok, "holds": ok == total})
    with open(run.path("reports", "lemma_check.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    bias = causal.bias_report(sorted(set((0.0,) + tuple(cfg.lemma_gammas))),
                              num_users=cfg.lemma_users, num_items=cfg.lemma_items)
    causal.write_bias_report(bias, run.path("reports", "bias_by_gamma.csv"))
    logger.info("lemma check: %d failures over %d models", failures, len(rows))
    return failures == 0


def cmd_pipeline(run: Run) -> None:
    cmd_prepare(run)
    run._dataset = None
    cmd_train_teacher(run)
    cmd_train_student_base(run)
    if run.cfg.method != "none":
        cmd_distill(run)
    cmd_evaluate(run)


HANDLERS = {
    "prepare": cmd_prepare,
    "train-teacher": cmd_train_teacher,
    "train-student-base": cmd_train_student_base,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "sweep-k": cmd_sweep_k,
    "lemma-check": cmd_lemma_check,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unkd", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", default="runs/latest", help="run directory")
    parser.add_argument("--method", choices=METHODS)
    parser.add_argument("--k", type=int)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--mu", type=float)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def run(command: str, cfg: ExperimentConfig, out: str) -> int:
    """Execute one command; returns the process exit status."""
    stale = os.path.join(out, "STALE")
    os.makedirs(out, exist_ok=True)
    started = time.perf_counter()
    try:
        r = Run(cfg, out)
        result = HANDLERS[command](r)
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        with open(stale, "w") as fh:
            fh.write(f"command: {command}\nerror: {exc}\n")
        print(f"unkd {command}: error: {exc}", file=sys.stderr)
        return 1
    if os.path.exists(stale):
        os.remove(stale)
    logger.info("%s finished in %.1fs", command, time.perf_counter() - started)
    if result is False:
        print(f"unkd {command}: check failed", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, check_files=args.command in ("prepare", "pipeline"),
                          seed=args.seed, method=args.method, k=args.k, lam=args.lam, mu=args.mu)
    except (OSError, ConfigError) as exc:
        print(f"unkd: config error: {exc}", file=sys.stderr)
        return 2
    limiter = _limit_threads()
    try:
        return run(args.command, cfg, args.out)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
