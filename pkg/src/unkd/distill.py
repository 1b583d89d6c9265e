"""Popularity-stratified ranking distillation and the RD / CD baselines.

Items are cut into K contiguous groups of (near) equal popularity mass. For
every user the frozen teacher ranks the unobserved items inside each group,
and the student is trained on (higher-ranked, lower-ranked) pairs drawn from
the same group, so a popularity offset shared by the group cancels out of
every pair. CD is the K = 1 special case of the same machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .backbone import EmbeddingModel, score_users, top_n_batch


class DistillationError(ValueError):
    pass


@dataclass
class PopularityPartition:
    groups: list[np.ndarray]
    group_mass: np.ndarray

    @property
    def k(self) -> int:
        return len(self.groups)

    @property
    def num_items(self) -> int:
        return int(sum(len(g) for g in self.groups))

    def item_group(self) -> np.ndarray:
        out = np.empty(self.num_items, dtype=np.int64)
        for g, items in enumerate(self.groups):
            out[items] = g
        return out


def popularity_order(popularity: np.ndarray) -> np.ndarray:
    """Item indices sorted by popularity descending, ties by ascending index."""
    popularity = np.asarray(popularity)
    return np.lexsort((np.arange(len(popularity)), -popularity))


def partition_items(popularity: np.ndarray, k: int) -> PopularityPartition:
    """Greedy equal-mass split of the popularity-sorted item stream.

    A group is closed as soon as its mass reaches (remaining mass) / (remaining
    groups). The last group takes whatever is left, including items with zero
    popularity.
    """
    popularity = np.asarray(popularity, dtype=np.int64)
    if k < 1:
        raise DistillationError("k must be >= 1")
    if np.any(popularity < 0):
        raise DistillationError("popularity counts must be non-negative")
    n_positive = int((popularity > 0).sum())
    if k > n_positive:
        raise DistillationError(f"k={k} exceeds the {n_positive} items with positive popularity")
    order = popularity_order(popularity)
    groups: list[np.ndarray] = []
    start = 0
    remaining = int(popularity.sum())
    for g in range(k - 1):
        target = remaining / (k - g)
        mass = 0
        end = start
        # Leave at least one positive item for each group still to be formed.
        last_allowed = n_positive - (k - g - 1)
        while end < last_allowed:
            mass += int(popularity[order[end]])
            end += 1
            if mass >= target:
                break
        groups.append(order[start:end])
        remaining -= mass
        start = end
    groups.append(order[start:])
    mass = np.array([int(popularity[g].sum()) for g in groups], dtype=np.int64)
    return PopularityPartition(groups=groups, group_mass=mass)


def single_group(num_items: int) -> PopularityPartition:
    """The trivial partition used by CD and RD: every item in one group."""
    return PopularityPartition(groups=[np.arange(num_items)], group_mass=np.zeros(1, dtype=np.int64))


def rank_sampling_weights(length: int, mu: float) -> np.ndarray:
    """p_k proportional to exp(-k / mu) over 1-based ranks k = 1..length."""
    if length < 1:
        raise DistillationError("length must be >= 1")
    if mu <= 0:
        raise DistillationError("mu must be positive")
    ranks = np.arange(1, length + 1, dtype=np.float64)
    # Shifting by the first rank leaves the normalized weights unchanged but avoids underflow.
    w = np.exp(-(ranks - 1.0) / mu)
    return w / w.sum()


def sample_positive_ranks(lengths: np.ndarray, mu: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """0-based ranks drawn from :func:`rank_sampling_weights` truncated to each list length.

    Returns an array of shape (len(lengths), size).
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    cdf = np.cumsum(np.exp(-np.arange(max(int(lengths.max(initial=1)), 1)) / mu))
    totals = cdf[lengths - 1]
    draws = rng.random((len(lengths), size)) * totals[:, None]
    ranks = np.searchsorted(cdf, draws, side="right")
    return np.minimum(ranks, (lengths - 1)[:, None])


def _sample_pair_ranks(lengths: np.ndarray, mu: float, size: int, rng: np.random.Generator):
    """(positive, negative) 0-based ranks with positive strictly above negative.

    A positive that lands on the last rank has nothing below it and is redrawn.
    """
    pos = sample_positive_ranks(lengths, mu, size, rng)
    last = pos == (lengths - 1)[:, None]
    while last.any():
        rows = np.nonzero(last)[0]
        redraw = sample_positive_ranks(lengths[rows], mu, 1, rng)[:, 0]
        pos[last] = redraw
        last = pos == (lengths - 1)[:, None]
    span = lengths[:, None] - pos - 1
    neg = pos + 1 + np.minimum((rng.random(pos.shape) * span).astype(np.int64), span - 1)
    return pos, neg


def sample_group_pairs(ranking: np.ndarray, mu: float, pairs_per_group: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Pairs (i+, i-) from one teacher-ranked candidate list, shape (pairs_per_group, 2)."""
    ranking = np.asarray(ranking)
    if len(ranking) < 2:
        raise DistillationError("a candidate list needs at least two items to form pairs")
    pos, neg = _sample_pair_ranks(np.array([len(ranking)]), mu, pairs_per_group, rng)
    return np.stack([ranking[pos[0]], ranking[neg[0]]], axis=1)


@dataclass
class DistillPlan:
    """Teacher-ranked candidates per (user, group).

    ``candidates[u, g, :lengths[u, g]]`` lists the top unobserved items of
    group g for user u by teacher score (descending, ties by item index);
    padding is -1. ``scores`` holds the matching teacher scores.
    """

    candidates: np.ndarray
    scores: np.ndarray
    lengths: np.ndarray
    partition: PopularityPartition
    budget: int
    mu: float

    @property
    def num_users(self) -> int:
        return self.candidates.shape[0]

    @property
    def per_group(self) -> int:
        return self.candidates.shape[2]


def per_group_budget(budget: int, k: int) -> int:
    return math.ceil(budget / k)


def _ranked_groups(teacher_scores: np.ndarray, groups_sorted: list[np.ndarray], per_group: int):
    rows = teacher_scores.shape[0]
    k = len(groups_sorted)
    cand = np.full((rows, k, per_group), -1, dtype=np.int64)
    vals = np.full((rows, k, per_group), -np.inf)
    for g, items in enumerate(groups_sorted):
        if len(items) == 0:
            continue
        sub = teacher_scores[:, items]
        top = top_n_batch(sub, per_group)
        ok = top >= 0
        cand[:, g, :] = np.where(ok, items[np.where(ok, top, 0)], -1)
        vals[:, g, :] = np.where(ok, np.take_along_axis(sub, np.where(ok, top, 0), axis=1), -np.inf)
    return cand, vals


def _masked_teacher_scores(teacher, dataset, users):
    scores = score_users(teacher, users)
    for r, u in enumerate(users):
        scores[r, dataset.train[u]] = -np.inf
        scores[r, dataset.valid[u]] = -np.inf
    return scores


def teacher_group_ranking(teacher: EmbeddingModel, partition: PopularityPartition, u: int,
                          budget: int, observed=()) -> list[np.ndarray]:
    """Per-group candidate lists for one user, each of length <= ceil(budget / K).

    ``observed`` items (train and validation) are never candidates. Groups with
    no unobserved item yield an empty list.
    """
    if budget < partition.k:
        raise DistillationError("soft-label budget must be at least the number of groups")
    scores = score_users(teacher, np.array([u]))
    scores[0, np.asarray(list(observed), dtype=np.int64)] = -np.inf
    groups_sorted = [np.sort(g) for g in partition.groups]
    cand, _ = _ranked_groups(scores, groups_sorted, per_group_budget(budget, partition.k))
    return [row[row >= 0] for row in cand[0]]


def build_plan(teacher: EmbeddingModel, dataset, partition: PopularityPartition, budget: int,
               mu: float, batch: int = 512) -> DistillPlan:
    """Materialize every user's per-group teacher ranking once (the teacher is frozen)."""
    if budget < partition.k:
        raise DistillationError("soft-label budget must be at least the number of groups")
    if mu <= 0:
        raise DistillationError("mu must be positive")
    per_group = per_group_budget(budget, partition.k)
    groups_sorted = [np.sort(g) for g in partition.groups]
    m = dataset.num_users
    cand = np.empty((m, partition.k, per_group), dtype=np.int64)
    vals = np.empty((m, partition.k, per_group))
    for start in range(0, m, batch):
        users = np.arange(start, min(start + batch, m))
        c, v = _ranked_groups(_masked_teacher_scores(teacher, dataset, users), groups_sorted, per_group)
        cand[users], vals[users] = c, v
    return DistillPlan(candidates=cand, scores=vals, lengths=(cand >= 0).sum(axis=2),
                       partition=partition, budget=budget, mu=mu)


def unkd_plan(teacher, dataset, k: int, budget: int, mu: float) -> DistillPlan:
    return build_plan(teacher, dataset, partition_items(dataset.popularity, k), budget, mu)


def cd_baseline_plan(teacher, dataset, budget: int, mu: float) -> DistillPlan:
    """CD as the one-group case: candidates are the teacher's global top-``budget``."""
    return build_plan(teacher, dataset, single_group(dataset.num_items), budget, mu)


@dataclass
class PairSet:
    """Sampled pairs ordered by user; rows of user u are offsets[u]:offsets[u+1]."""

    users: np.ndarray
    groups: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def select(self, users: np.ndarray) -> "PairSet":
        starts, stops = self.offsets[users], self.offsets[users + 1]
        counts = stops - starts
        idx = np.repeat(starts - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
        sub_off = np.zeros(len(users) + 1, dtype=np.int64)
        sub_off[1:] = np.cumsum(counts)
        return PairSet(self.users[idx], self.groups[idx], self.pos[idx], self.neg[idx], sub_off)

    def as_set(self) -> list[tuple[int, int, int, int]]:
        return sorted(zip(self.users.tolist(), self.groups.tolist(), self.pos.tolist(), self.neg.tolist()))


def sample_plan_pairs(plan: DistillPlan, rng: np.random.Generator,
                      pairs_per_group: int | None = None) -> PairSet:
    """Draw S_ug for every (user, group) whose candidate list has at least two items."""
    if pairs_per_group is None:
        pairs_per_group = plan.per_group
    m, k, _ = plan.candidates.shape
    lengths = plan.lengths.reshape(-1)
    rows = np.flatnonzero(lengths >= 2)
    pos_r, neg_r = _sample_pair_ranks(lengths[rows], plan.mu, pairs_per_group, rng)
    flat = plan.candidates.reshape(m * k, -1)[rows]
    users = np.repeat(rows // k, pairs_per_group)
    counts = np.bincount(users, minlength=m)
    offsets = np.zeros(m + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(counts)
    return PairSet(
        users=users,
        groups=np.repeat(rows % k, pairs_per_group),
        pos=np.take_along_axis(flat, pos_r, axis=1).reshape(-1),
        neg=np.take_along_axis(flat, neg_r, axis=1).reshape(-1),
        offsets=offsets,
    )


def _scatter(num_rows: int, dim: int, idx: np.ndarray, vals: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros((num_rows, dim), dtype=dtype)
    np.add.at(out, idx, vals)
    return out


def group_distill_loss_and_grad(student: EmbeddingModel, users: np.ndarray, pos: np.ndarray,
                                neg: np.ndarray, num_users: int | None = None):
    """L_G = -(1/|U|) sum over sampled pairs of log sigmoid(s(u, i+) - s(u, i-)).

    Pairs of one user are summed, users are averaged. ``num_users`` defaults
    to the number of distinct users among the pairs. Returns
    (loss, grad_user, grad_item) with gradients w.r.t. the student parameters.
    """
    user_f, item_f = student.final_embeddings()
    dtype = user_f.dtype
    if len(users) == 0:
        return 0.0, np.zeros_like(student.user_emb), np.zeros_like(student.item_emb)
    if num_users is None:
        num_users = len(np.unique(users))
    eu, ep, en = user_f[users], item_f[pos], item_f[neg]
    diff = np.einsum("ij,ij->i", eu, ep - en)
    loss = float(np.logaddexp(0.0, -diff.astype(np.float64)).sum() / num_users)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite distillation loss")
    coef = (-expit(-diff) / num_users).astype(dtype)[:, None]
    g_user = _scatter(student.num_users, student.dim, users, coef * (ep - en), dtype)
    g_item = _scatter(student.num_items, student.dim, np.concatenate([pos, neg]),
                      np.concatenate([coef * eu, -coef * eu]), dtype)
    g_user, g_item = student.backprop(g_user, g_item)
    return loss, g_user, g_item


def rd_baseline_loss(student: EmbeddingModel, users: np.ndarray, top_items: np.ndarray,
                     weights: np.ndarray, num_users: int | None = None):
    """Position-weighted pointwise loss on the teacher's top items.

    ``top_items`` is (len(users), N) with -1 padding; the loss is
    -(1/|U|) sum_u sum_k w_k log sigmoid(s(u, item_k)).
    """
    user_f, item_f = student.final_embeddings()
    dtype = user_f.dtype
    if num_users is None:
        num_users = len(np.unique(users))
    valid = top_items >= 0
    rows, cols = np.nonzero(valid)
    u = users[rows]
    it = top_items[rows, cols]
    w = np.asarray(weights, dtype=np.float64)[cols]
    eu, ei = user_f[u], item_f[it]
    s = np.einsum("ij,ij->i", eu, ei)
    loss = float((w * np.logaddexp(0.0, -s.astype(np.float64))).sum() / max(num_users, 1))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite RD loss")
    coef = (-w * expit(-s) / max(num_users, 1)).astype(dtype)[:, None]
    g_user = _scatter(student.num_users, student.dim, u, coef * ei, dtype)
    g_item = _scatter(student.num_items, student.dim, it, coef * eu, dtype)
    g_user, g_item = student.backprop(g_user, g_item)
    return loss, g_user, g_item


def combined_objective(base, distill, lam: float):
    """L = L_R + lam * L_G, applied to (loss, grad_user, grad_item) triples."""
    if lam < 0:
        raise DistillationError("lambda must be >= 0")
    loss_r, gu_r, gi_r = base
    loss_g, gu_g, gi_g = distill
    return loss_r + lam * loss_g, gu_r + lam * gu_g, gi_r + lam * gi_g


class PairDistiller:
    """Pairwise distillation objective for UnKD and CD, resampled every epoch by default."""

    def __init__(self, plan: DistillPlan, lam: float, seed: int = 0,
                 pairs_per_group: int | None = None, resample: bool = True):
        self.plan = plan
        self.lam = lam
        self.pairs_per_group = pairs_per_group
        self.resample = resample
        self.rng = np.random.default_rng([seed, 0x5D])
        self.pairs: PairSet | None = None

    def start_epoch(self, epoch: int) -> None:
        if self.pairs is None or self.resample:
            self.pairs = sample_plan_pairs(self.plan, self.rng, self.pairs_per_group)

    def user_batches(self, num_batches: int) -> list[np.ndarray]:
        return np.array_split(self.rng.permutation(self.plan.num_users), num_batches)

    def loss_and_grad(self, student: EmbeddingModel, users: np.ndarray):
        sel = self.pairs.select(users)
        return group_distill_loss_and_grad(student, sel.users, sel.pos, sel.neg, num_users=len(users))


class RankDistiller:
    """RD: the teacher's global top-N unobserved items as weighted pointwise positives."""

    def __init__(self, plan: DistillPlan, lam: float, seed: int = 0):
        if plan.partition.k != 1:
            raise DistillationError("RD uses a single global candidate list")
        self.top = plan.candidates[:, 0, :]
        self.weights = rank_sampling_weights(plan.per_group, plan.mu)
        self.lam = lam
        self.rng = np.random.default_rng([seed, 0x5D])
        self.num_users = plan.num_users

    def start_epoch(self, epoch: int) -> None:
        pass

    def user_batches(self, num_batches: int) -> list[np.ndarray]:
        return np.array_split(self.rng.permutation(self.num_users), num_batches)

    def loss_and_grad(self, student: EmbeddingModel, users: np.ndarray):
        return rd_baseline_loss(student, users, self.top[users], self.weights, num_users=len(users))


def dump_plan(plan: DistillPlan, path) -> None:
    """Write ``user<TAB>group<TAB>rank<TAB>item<TAB>teacher_score`` rows."""
    with open(path, "w", newline="\n") as fh:
        fh.write("user\tgroup\trank\titem\tteacher_score\n")
        m, k, _ = plan.candidates.shape
        for u in range(m):
            for g in range(k):
                for r in range(plan.lengths[u, g]):
                    fh.write(f"{u}\t{g}\t{r + 1}\t{plan.candidates[u, g, r]}\t{plan.scores[u, g, r]:.6g}\n")
