"""Top-N ranking metrics, popularity-group breakdowns and the popularity-share audit."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backbone import EmbeddingModel, score_users, top_n_batch


def _head(top: Sequence[int], n: int) -> list[int]:
    return [int(i) for i in list(top)[:n] if int(i) >= 0]


def recall_at_n(top: Sequence[int], relevant: Iterable[int], n: int) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("recall is undefined for an empty relevant set")
    return len(set(_head(top, n)) & relevant) / len(relevant)


def ndcg_at_n(top: Sequence[int], relevant: Iterable[int], n: int) -> float:
    """Binary-relevance NDCG with the ideal list truncated at min(|relevant|, n)."""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("NDCG is undefined for an empty relevant set")
    dcg = sum(1.0 / math.log2(k + 2) for k, item in enumerate(_head(top, n)) if item in relevant)
    idcg = sum(1.0 / math.log2(k + 2) for k in range(min(len(relevant), n)))
    return dcg / idcg


def group_recall(top: Sequence[int], relevant: Iterable[int], group: Iterable[int], n: int) -> float:
    """Recall restricted to the relevant items that belong to ``group``."""
    target = set(int(i) for i in relevant) & set(int(i) for i in group)
    if not target:
        raise ValueError("no relevant item in group")
    return len(set(_head(top, n)) & target) / len(target)


def popularity_share(top_lists: Iterable[Sequence[int]], group: Iterable[int], n: int) -> float:
    """Fraction of all recommended slots (first ``n`` of each list) filled by ``group`` items."""
    members = set(int(i) for i in group)
    slots = hits = 0
    for top in top_lists:
        head = _head(top, n)
        slots += len(head)
        hits += sum(1 for i in head if i in members)
    return hits / slots if slots else 0.0


def ideal_share(relevant_sets: Iterable[Iterable[int]], group: Iterable[int]) -> float:
    """Share of ``group`` items among all held-out interactions."""
    members = set(int(i) for i in group)
    total = hits = 0
    for rel in relevant_sets:
        rel = list(rel)
        total += len(rel)
        hits += sum(1 for i in rel if int(i) in members)
    return hits / total if total else 0.0


GROUP_NAMES = ("popular", "unpopular")


@dataclass
class EvalReport:
    n: int
    recall: float
    ndcg: float
    num_users: int
    group_recall: dict[str, float] = field(default_factory=dict)
    group_users: dict[str, int] = field(default_factory=dict)
    share: dict[str, float] = field(default_factory=dict)
    ideal_share: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float]]:
        """(metric, group, value) triples in a fixed order."""
        out = [("recall", "overall", self.recall), ("ndcg", "overall", self.ndcg)]
        for g in self.group_recall:
            out.append(("recall", g, self.group_recall[g]))
        for g in self.share:
            out.append(("share", g, self.share[g]))
        for g in self.ideal_share:
            out.append(("ideal_share", g, self.ideal_share[g]))
        # Users counted in each average; group recall skips users with no relevant group item.
        out.append(("users", "overall", self.num_users))
        for g in self.group_users:
            out.append(("users", g, self.group_users[g]))
        return out


def _relevance_matrix(users: np.ndarray, sets: Sequence[np.ndarray], num_items: int) -> np.ndarray:
    rel = np.zeros((len(users), num_items), dtype=bool)
    for r, u in enumerate(users):
        rel[r, sets[u]] = True
    return rel


def _exclusion_scores(model, dataset, users, exclude_splits):
    scores = score_users(model, users)
    for r, u in enumerate(users):
        for split in exclude_splits:
            scores[r, split[u]] = -np.inf
    return scores


def rank_users(model: EmbeddingModel, dataset, n: int, exclude=("train", "valid"),
               users: np.ndarray | None = None, batch: int = 1024) -> np.ndarray:
    """Top-n lists (padded with -1) for ``users`` with the named splits excluded."""
    if users is None:
        users = np.arange(dataset.num_users)
    splits = [getattr(dataset, s) for s in exclude]
    out = np.empty((len(users), n), dtype=np.int64)
    for start in range(0, len(users), batch):
        chunk = users[start:start + batch]
        out[start:start + len(chunk)] = top_n_batch(_exclusion_scores(model, dataset, chunk, splits), n)
    return out


def _batch_metrics(top: np.ndarray, rel: np.ndarray, n: int):
    valid = top >= 0
    hit = np.take_along_axis(rel, np.where(valid, top, 0), axis=1) & valid
    n_rel = rel.sum(axis=1)
    disc = 1.0 / np.log2(np.arange(2, n + 2))
    idcg = np.cumsum(disc)
    recall = hit.sum(axis=1) / np.maximum(n_rel, 1)
    ndcg = (hit * disc[:top.shape[1]]).sum(axis=1) / idcg[np.clip(np.minimum(n_rel, n) - 1, 0, None)]
    return hit, n_rel, recall, ndcg


def validation_ndcg(model: EmbeddingModel, dataset, n: int = 10, batch: int = 1024) -> float:
    """Mean NDCG@n against the validation split, with training items excluded."""
    users = np.array([u for u in range(dataset.num_users) if len(dataset.valid[u])], dtype=np.int64)
    if users.size == 0:
        raise ValueError("validation split is empty")
    total = 0.0
    for start in range(0, len(users), batch):
        chunk = users[start:start + batch]
        top = top_n_batch(_exclusion_scores(model, dataset, chunk, [dataset.train]), n)
        rel = _relevance_matrix(chunk, dataset.valid, dataset.num_items)
        total += _batch_metrics(top, rel, n)[3].sum()
    return float(total / len(users))


def evaluate_model(model: EmbeddingModel, dataset, partition, n: int = 10,
                   batch: int = 1024) -> EvalReport:
    """Test-set Recall/NDCG overall and per popularity group.

    ``partition`` is a two-group :class:`~unkd.distill.PopularityPartition`;
    group 0 is reported as popular and group 1 as unpopular.
    """
    if partition.k != 2:
        raise ValueError("evaluation expects a two-group partition")
    member = [np.zeros(dataset.num_items, dtype=bool) for _ in range(2)]
    for g in range(2):
        member[g][partition.groups[g]] = True
    users = np.array([u for u in range(dataset.num_users) if len(dataset.test[u])], dtype=np.int64)
    sum_recall = sum_ndcg = 0.0
    g_sum = np.zeros(2)
    g_users = np.zeros(2, dtype=np.int64)
    slots = 0
    g_slots = np.zeros(2, dtype=np.int64)
    for start in range(0, len(users), batch):
        chunk = users[start:start + batch]
        top = rank_users(model, dataset, n, users=chunk, batch=batch)
        rel = _relevance_matrix(chunk, dataset.test, dataset.num_items)
        hit, _, recall, ndcg = _batch_metrics(top, rel, n)
        sum_recall += recall.sum()
        sum_ndcg += ndcg.sum()
        valid = top >= 0
        slots += int(valid.sum())
        for g in range(2):
            in_g = member[g][np.where(valid, top, 0)] & valid
            g_slots[g] += int(in_g.sum())
            rel_g = (rel & member[g][None, :]).sum(axis=1)
            ok = rel_g > 0
            g_users[g] += int(ok.sum())
            g_sum[g] += ((hit & in_g).sum(axis=1)[ok] / rel_g[ok]).sum()
    all_test = [dataset.test[u] for u in users]
    test_items = np.concatenate(all_test) if all_test else np.zeros(0, np.int64)
    return EvalReport(
        n=n,
        recall=float(sum_recall / len(users)) if len(users) else 0.0,
        ndcg=float(sum_ndcg / len(users)) if len(users) else 0.0,
        num_users=int(len(users)),
        group_recall={GROUP_NAMES[g]: float(g_sum[g] / g_users[g]) if g_users[g] else 0.0 for g in range(2)},
        group_users={GROUP_NAMES[g]: int(g_users[g]) for g in range(2)},
        share={GROUP_NAMES[g]: float(g_slots[g] / slots) if slots else 0.0 for g in range(2)},
        ideal_share={GROUP_NAMES[g]: float(member[g][test_items].mean()) if test_items.size else 0.0
                     for g in range(2)},
    )


REPORT_COLUMNS = ("dataset", "backbone", "method", "metric", "group", "N", "value", "seed")


def _fmt(value) -> str:
    return str(value) if isinstance(value, (int, np.integer)) else f"{value:.6f}"


def report_rows(report: EvalReport, dataset: str, backbone: str, method: str, seed: int) -> list[dict]:
    return [{"dataset": dataset, "backbone": backbone, "method": method, "metric": metric,
             "group": group, "N": report.n, "value": _fmt(value), "seed": seed}
            for metric, group, value in report.rows()]


def write_report_csv(rows: Iterable[dict], path, columns: Sequence[str] = REPORT_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
