"""Interaction log ingestion, per-user splitting and item popularity."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Guards floor() against representation error, e.g. 0.29 * 100 = 28.999999999999996.
_FLOOR_EPS = 1e-9


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    raw_rating: float
    timestamp: int


@dataclass
class InteractionLog:
    """Column-oriented interaction table with dense ids.

    ``user_ids[k]`` / ``item_ids[k]`` give the raw identifier of dense index k.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: list[str]
    item_ids: list[str]

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield Interaction(int(u), int(i), float(r), int(t))

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)


def _split_line(line: str, delimiter: str | None) -> list[str]:
    if delimiter is None or delimiter.strip() == "":
        return line.split()
    return line.split(delimiter)


def load_interactions(path: str | os.PathLike, delimiter: str | None = "::",
                      rating_threshold: float = 0.0) -> InteractionLog:
    """Read ``user<d>item[<d>rating[<d>timestamp]]`` lines.

    Rows rated below ``rating_threshold`` are dropped, duplicate (user, item)
    rows keep their first occurrence, and the surviving raw ids are mapped
    to dense indices in order of first appearance. A whitespace delimiter
    (``" "`` or ``None``) splits on any run of whitespace.
    """
    if not os.path.exists(path):
        raise DatasetError(f"{path}: no such file")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users, items, ratings, stamps = [], [], [], []
    seen: set[tuple[int, int]] = set()
    n_lines = 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            n_lines += 1
            fields = [f.strip() for f in _split_line(line, delimiter)]
            if len(fields) < 2 or not fields[0] or not fields[1]:
                raise DatasetError(f"{path}:{lineno}: expected at least user and item fields")
            try:
                rating = float(fields[2]) if len(fields) > 2 and fields[2] else 1.0
                stamp = int(float(fields[3])) if len(fields) > 3 and fields[3] else 0
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if rating < rating_threshold:
                continue
            u = user_index.setdefault(fields[0], len(user_index))
            i = item_index.setdefault(fields[1], len(item_index))
            if (u, i) in seen:
                continue
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(rating)
            stamps.append(stamp)
    if n_lines == 0:
        raise DatasetError(f"{path}: empty file")
    return InteractionLog(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=np.float64),
        timestamps=np.asarray(stamps, dtype=np.int64),
        user_ids=list(user_index),
        item_ids=list(item_index),
    )


def _compact(log: InteractionLog, keep: np.ndarray) -> InteractionLog:
    users, items = log.users[keep], log.items[keep]
    kept_users = np.unique(users)
    kept_items = np.unique(items)
    user_map = np.full(log.num_users, -1, dtype=np.int64)
    user_map[kept_users] = np.arange(len(kept_users))
    item_map = np.full(log.num_items, -1, dtype=np.int64)
    item_map[kept_items] = np.arange(len(kept_items))
    return InteractionLog(
        users=user_map[users],
        items=item_map[items],
        ratings=log.ratings[keep],
        timestamps=log.timestamps[keep],
        user_ids=[log.user_ids[k] for k in kept_users],
        item_ids=[log.item_ids[k] for k in kept_items],
    )


def filter_min_interactions(log: InteractionLog, min_count: int = 20) -> InteractionLog:
    """Drop users with fewer than ``min_count`` interactions (single pass)."""
    if min_count < 1:
        raise DatasetError("min_count must be >= 1")
    counts = log.user_counts()
    keep = counts[log.users] >= min_count
    if not keep.any():
        raise DatasetError(f"no user has >= {min_count} interactions")
    out = _compact(log, keep)
    logger.info("filter_min_interactions(%d): %d -> %d users, %d -> %d items",
                min_count, log.num_users, out.num_users, log.num_items, out.num_items)
    return out


@dataclass
class InteractionDataset:
    """Immutable train/valid/test split. Each split is a list of sorted item arrays."""

    num_users: int
    num_items: int
    train: list[np.ndarray]
    valid: list[np.ndarray]
    test: list[np.ndarray]
    popularity: np.ndarray
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            split = getattr(self, name)
            if len(split) != self.num_users:
                raise DatasetError(f"{name} has {len(split)} users, expected {self.num_users}")
        if len(self.popularity) != self.num_items:
            raise DatasetError("popularity length does not match num_items")

    @property
    def num_train(self) -> int:
        return int(sum(len(t) for t in self.train))

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return _pairs(self.train)

    def valid_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return _pairs(self.valid)

    def test_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return _pairs(self.test)

    def observed(self, u: int, include_valid: bool = True) -> np.ndarray:
        if include_valid:
            return np.union1d(self.train[u], self.valid[u])
        return self.train[u]


def _pairs(split: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.fromiter((len(s) for s in split), dtype=np.int64, count=len(split))
    users = np.repeat(np.arange(len(split), dtype=np.int64), lens)
    items = np.concatenate(split).astype(np.int64) if len(split) else np.zeros(0, np.int64)
    return users, items


def compute_popularity(train: Sequence[np.ndarray], num_items: int) -> np.ndarray:
    """Z_i = number of users with item i in their training set."""
    if len(train) == 0:
        return np.zeros(num_items, dtype=np.int64)
    return np.bincount(np.concatenate(train).astype(np.int64), minlength=num_items)


def split_sizes(count: int, test_frac: float, valid_frac: float) -> tuple[int, int, int]:
    """(train, valid, test) sizes for a user with ``count`` interactions."""
    n_test = max(1, math.floor(count * test_frac + _FLOOR_EPS))
    n_valid = math.floor((count - n_test) * valid_frac + _FLOOR_EPS)
    return count - n_test - n_valid, n_valid, n_test


def split_per_user(log: InteractionLog, test_frac: float = 0.1, valid_frac: float = 0.1,
                   seed: int = 0) -> InteractionDataset:
    """Random per-user holdout: test first, then validation carved from the rest."""
    if not 0.0 < test_frac < 1.0:
        raise DatasetError("test_frac must lie in (0, 1)")
    if not 0.0 <= valid_frac < 1.0:
        raise DatasetError("valid_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = np.argsort(log.users, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(log.user_counts())])
    train, valid, test = [], [], []
    for u in range(log.num_users):
        items = log.items[order[bounds[u]:bounds[u + 1]]]
        n_train, n_valid, n_test = split_sizes(len(items), test_frac, valid_frac)
        if n_train <= 0:
            raise DatasetError(
                f"user {log.user_ids[u]!r} has {len(items)} interactions; train split would be empty")
        perm = items[rng.permutation(len(items))]
        test.append(np.sort(perm[:n_test]))
        valid.append(np.sort(perm[n_test:n_test + n_valid]))
        train.append(np.sort(perm[n_test + n_valid:]))
    return InteractionDataset(
        num_users=log.num_users,
        num_items=log.num_items,
        train=train,
        valid=valid,
        test=test,
        popularity=compute_popularity(train, log.num_items),
        user_ids=list(log.user_ids),
        item_ids=list(log.item_ids),
    )


def prepare_dataset(path, delimiter="::", rating_threshold=0.0, min_count=20,
                    test_frac=0.1, valid_frac=0.1, seed=0) -> InteractionDataset:
    log = load_interactions(path, delimiter, rating_threshold)
    log = filter_min_interactions(log, min_count)
    return split_per_user(log, test_frac, valid_frac, seed)


def subsample_users(log: InteractionLog, fraction: float, seed: int = 0) -> InteractionLog:
    """Keep a random ``fraction`` of users (all of their interactions)."""
    if not 0.0 < fraction <= 1.0:
        raise DatasetError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n_keep = max(1, int(round(log.num_users * fraction)))
    chosen = np.zeros(log.num_users, dtype=bool)
    chosen[rng.choice(log.num_users, size=n_keep, replace=False)] = True
    return _compact(log, chosen[log.users])


# Archive layout, all tab separated:
#   meta.tsv        key<TAB>value (num_users, num_items, format)
#   train.tsv, valid.tsv, test.tsv   user<TAB>item, sorted by (user, item)
#   popularity.tsv  item<TAB>count for every item index
#   id_map.tsv      kind<TAB>index<TAB>raw_id with kind in {user, item}
ARCHIVE_FORMAT = "unkd-dataset-1"


def save_dataset(ds: InteractionDataset, directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "meta.tsv"), "w", newline="\n") as fh:
        fh.write(f"format\t{ARCHIVE_FORMAT}\nnum_users\t{ds.num_users}\nnum_items\t{ds.num_items}\n")
    for name in ("train", "valid", "test"):
        with open(os.path.join(directory, f"{name}.tsv"), "w", newline="\n") as fh:
            for u, items in enumerate(getattr(ds, name)):
                fh.writelines(f"{u}\t{int(i)}\n" for i in items)
    with open(os.path.join(directory, "popularity.tsv"), "w", newline="\n") as fh:
        fh.writelines(f"{i}\t{int(z)}\n" for i, z in enumerate(ds.popularity))
    with open(os.path.join(directory, "id_map.tsv"), "w", newline="\n") as fh:
        fh.writelines(f"user\t{k}\t{raw}\n" for k, raw in enumerate(ds.user_ids))
        fh.writelines(f"item\t{k}\t{raw}\n" for k, raw in enumerate(ds.item_ids))


def _read_split(path: str, num_users: int) -> list[np.ndarray]:
    data = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    if data.size == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(num_users)]
    users, items = data[:, 0], data[:, 1]
    bounds = np.searchsorted(users, np.arange(num_users + 1))
    return [np.sort(items[bounds[u]:bounds[u + 1]]) for u in range(num_users)]


def load_dataset(directory: str | os.PathLike) -> InteractionDataset:
    meta = {}
    with open(os.path.join(directory, "meta.tsv")) as fh:
        for line in fh:
            key, value = line.rstrip("\n").split("\t")
            meta[key] = value
    if meta.get("format") != ARCHIVE_FORMAT:
        raise DatasetError(f"{directory}: unknown archive format {meta.get('format')!r}")
    m, n = int(meta["num_users"]), int(meta["num_items"])
    splits = {name: _read_split(os.path.join(directory, f"{name}.tsv"), m)
              for name in ("train", "valid", "test")}
    pop = np.zeros(n, dtype=np.int64)
    pop_rows = np.loadtxt(os.path.join(directory, "popularity.tsv"), dtype=np.int64,
                          delimiter="\t", ndmin=2)
    pop[pop_rows[:, 0]] = pop_rows[:, 1]
    user_ids, item_ids = [""] * m, [""] * n
    with open(os.path.join(directory, "id_map.tsv")) as fh:
        for line in fh:
            kind, idx, raw = line.rstrip("\n").split("\t", 2)
            (user_ids if kind == "user" else item_ids)[int(idx)] = raw
    return InteractionDataset(m, n, popularity=pop, user_ids=user_ids, item_ids=item_ids, **splits)
