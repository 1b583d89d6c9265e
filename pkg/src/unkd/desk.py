"""Desk-scale reproduction protocol: teacher vs. base student vs. CD vs. UnKD, plus the K sweep.

Each seed trains one teacher, one base student, one CD student and one UnKD
student per K in ``cfg.sweep_k`` on a fixed split, and evaluates all of them
on the two-group test partition. The directional checks compare those
reports; a check passes overall when it holds for at least ``quorum`` seeds.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

from .backbone import BackboneSpec, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .dataset import filter_min_interactions, load_dataset, load_interactions, save_dataset, split_per_user, \
    subsample_users
from .distill import PairDistiller, cd_baseline_plan, partition_items, unkd_plan
from .evaluation import EvalReport, evaluate_model, report_rows, write_report_csv
from .trainer import TrainConfig, fit

logger = logging.getLogger(__name__)

ML1M_ENV = "UNKD_ML1M_PATH"
ML1M_DEFAULT = os.path.join("data", "ml-1m", "ratings.dat")


def find_ml1m(root: str | None = None) -> str | None:
    """Path to MovieLens-1M ratings.dat from $UNKD_ML1M_PATH or ``<root>/data/ml-1m``; None if absent."""
    candidates = [os.environ.get(ML1M_ENV, "")]
    candidates.append(os.path.join(root or os.getcwd(), ML1M_DEFAULT))
    for path in candidates:
        if path and os.path.isfile(path):
            return path
    return None


def prepare(cfg: ExperimentConfig, cache_dir: str | None = None):
    if cache_dir and os.path.exists(os.path.join(cache_dir, "meta.tsv")):
        return load_dataset(cache_dir)
    log = filter_min_interactions(load_interactions(cfg.dataset_path, cfg.delimiter, cfg.rating_threshold),
                                  cfg.min_interactions)
    if cfg.user_fraction < 1.0:
        log = subsample_users(log, cfg.user_fraction, seed=cfg.split_seed)
    ds = split_per_user(log, cfg.test_frac, cfg.valid_frac, seed=cfg.split_seed)
    if cache_dir:
        save_dataset(ds, cache_dir)
    return ds


@dataclass
class SeedResult:
    seed: int
    teacher: EvalReport
    base: EvalReport
    cd: EvalReport
    unkd: EvalReport
    sweep: dict[int, EvalReport] = field(default_factory=dict)

    def checks(self) -> dict[str, bool]:
        unpop = lambda r: r.group_recall["unpopular"]
        out = {
            "teacher_beats_base": self.teacher.recall > self.base.recall,
            "unkd_gain_3pct": self.unkd.recall >= 1.03 * self.base.recall,
            "unkd_unpopular_up": unpop(self.unkd) > unpop(self.base),
            "cd_unpopular_not_up": unpop(self.cd) <= unpop(self.base),
        }
        if 1 in self.sweep and any(k >= 2 for k in self.sweep):
            best = max(unpop(r) for k, r in self.sweep.items() if k >= 2)
            out["sweep_peak_after_k1"] = best > unpop(self.sweep[1])
        return out

    def rows(self, dataset: str, backbone: str) -> list[dict]:
        rows = []
        for label, rep in (("teacher", self.teacher), ("none", self.base), ("cd", self.cd), ("unkd", self.unkd)):
            rows += [{"K": "", **r} for r in report_rows(rep, dataset, backbone, label, self.seed)]
        for k, rep in sorted(self.sweep.items()):
            rows += [{"K": k, **r} for r in report_rows(rep, dataset, backbone, "unkd", self.seed)]
        return rows


def _train(ds, cfg: ExperimentConfig, dim: int, lr: float, l2: float, seed: int, init_seed: int,
           distiller=None, ckpt: str | None = None):
    if ckpt and os.path.exists(ckpt):
        return load_checkpoint(ckpt)
    model = BackboneSpec(cfg.backbone, dim, cfg.lightgcn_layers, cfg.init_scale).build(ds, init_seed)
    tc = TrainConfig(learning_rate=lr, l2_coeff=l2, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                     patience_epochs=cfg.patience, seed=seed, eval_n=cfg.eval_n)
    started = time.perf_counter()
    best, log = fit(model, ds, tc, distiller=distiller)
    logger.info("trained d=%d in %d epochs, %.0fs", dim, len(log), time.perf_counter() - started)
    if ckpt:
        save_checkpoint(best, ckpt)
    return best


def run_seed(ds, cfg: ExperimentConfig, seed: int, sweep: bool = True, work_dir: str | None = None) -> SeedResult:
    """Train and evaluate every model of the protocol for one seed (MF backbone)."""
    if cfg.backbone != "mf":
        raise ValueError("the desk protocol uses the MF backbone")
    ckpt = (lambda name: os.path.join(work_dir, f"seed{seed}_{name}.ckpt")) if work_dir else (lambda name: None)
    part = partition_items(ds.popularity, 2)
    report = lambda m: evaluate_model(m, ds, part, n=cfg.eval_n)

    teacher = _train(ds, cfg, cfg.teacher_dim, cfg.teacher_lr, cfg.teacher_l2, seed, seed, ckpt=ckpt("teacher"))

    def student(name, plan=None):
        dist = None
        if plan is not None:
            dist = PairDistiller(plan, cfg.lam, seed=seed, pairs_per_group=cfg.pairs_per_group or None,
                                 resample=cfg.resample_pairs)
        # same seeding as the CLI: students start from init seed + 1
        return report(_train(ds, cfg, cfg.student_dim, cfg.student_lr, cfg.student_l2, seed, seed + 1, dist,
                             ckpt=ckpt(name)))

    base = student("none")
    cd = student("cd", cd_baseline_plan(teacher, ds, cfg.soft_labels, cfg.mu))
    ks = sorted(set(cfg.sweep_k) | {cfg.k}) if sweep else [cfg.k]
    by_k = {k: student(f"unkd_k{k}", unkd_plan(teacher, ds, k, cfg.soft_labels, cfg.mu)) for k in ks}
    return SeedResult(seed, report(teacher), base, cd, by_k[cfg.k],
                      {k: r for k, r in by_k.items() if k in cfg.sweep_k} if sweep else {})


def tally(results: list[SeedResult], quorum: int = 2) -> dict[str, tuple[int, int, bool]]:
    """check -> (seeds passing, seeds evaluated, passes quorum)."""
    out = {}
    for name in results[0].checks():
        passed = sum(r.checks()[name] for r in results)
        out[name] = (passed, len(results), passed >= quorum)
    return out


def run_protocol(cfg: ExperimentConfig, seeds=(0, 1, 2), sweep: bool = True, out_dir: str | None = None):
    """Run every seed; write ``desk_metrics.csv`` into ``out_dir`` when given."""
    work = None
    if out_dir:
        work = os.path.join(out_dir, "checkpoints")
        os.makedirs(work, exist_ok=True)
    ds = prepare(cfg, os.path.join(out_dir, "data") if out_dir else None)
    logger.info("dataset: %d users, %d items, %d train", ds.num_users, ds.num_items, ds.num_train)
    results = []
    for seed in seeds:
        results.append(run_seed(ds, dataclasses.replace(cfg, seed=seed), seed, sweep=sweep, work_dir=work))
        if out_dir:
            rows = [row for r in results for row in r.rows(cfg.dataset_name, cfg.backbone)]
            write_report_csv(rows, os.path.join(out_dir, "desk_metrics.csv"),
                             columns=("K", "dataset", "backbone", "method", "metric", "group", "N", "value",
                                      "seed"))
    return results
