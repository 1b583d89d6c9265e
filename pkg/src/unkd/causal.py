"""A synthetic soft-label generator with an explicit popularity path.

Soft labels are built additively, Y(u, i) = M(u, i) + gamma * log(1 + Z_i),
so the interventional quantities below have closed forms:

* total effect        TE_i  = Y(u, i) - Y(u, i*)
* popularity path     PEZ_i = Y(u, i* ; Z <- Z_i) - Y(u, i*)
* preference path     PEM_i = TE_i - PEZ_i = Y(u, i) - Y(u, i* ; Z <- Z_i)

where i* is a fixed reference item.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def popularity_offset(z, gamma: float):
    return gamma * np.log1p(np.asarray(z, dtype=np.float64))


@dataclass
class SyntheticCausalModel:
    affinity: np.ndarray          # M, users x items
    popularity: np.ndarray        # Z, per item
    gamma: float
    reference_item: int           # i*

    @property
    def soft_labels(self) -> np.ndarray:
        return self.affinity + popularity_offset(self.popularity, self.gamma)[None, :]

    @property
    def num_users(self) -> int:
        return self.affinity.shape[0]

    @property
    def num_items(self) -> int:
        return self.affinity.shape[1]

    def outcome(self, u, item, z=None):
        """Structural equation for Y with the item's popularity optionally intervened to ``z``."""
        if z is None:
            z = self.popularity[item]
        return self.affinity[u, item] + popularity_offset(z, self.gamma)

    def with_popularity(self, popularity: np.ndarray) -> "SyntheticCausalModel":
        return SyntheticCausalModel(self.affinity, np.asarray(popularity), self.gamma, self.reference_item)


def median_popularity_item(popularity: np.ndarray) -> int:
    """Index of the item whose popularity is the (lower) median; ties go to the lowest index."""
    order = np.lexsort((np.arange(len(popularity)), popularity))
    return int(order[(len(popularity) - 1) // 2])


def generate(num_users: int, num_items: int, gamma: float = 1.0, zipf_exponent: float = 2.0,
             max_popularity: int = 1000, seed: int = 0, reference_item: int | None = None
             ) -> SyntheticCausalModel:
    """M ~ U(0, 1) i.i.d.; Z ~ Zipf(zipf_exponent) clipped to ``max_popularity``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    rng = np.random.default_rng(seed)
    affinity = rng.random((num_users, num_items))
    popularity = np.minimum(rng.zipf(zipf_exponent, size=num_items), max_popularity).astype(np.int64)
    if reference_item is None:
        reference_item = median_popularity_item(popularity)
    return SyntheticCausalModel(affinity, popularity, gamma, reference_item)


def total_effect(model: SyntheticCausalModel, u, i):
    ref = model.reference_item
    return model.outcome(u, i) - model.outcome(u, ref)


def path_effect_z(model: SyntheticCausalModel, u, i):
    ref = model.reference_item
    return model.outcome(u, ref, z=model.popularity[i]) - model.outcome(u, ref)


def path_effect_m(model: SyntheticCausalModel, u, i):
    ref = model.reference_item
    return model.outcome(u, i) - model.outcome(u, ref, z=model.popularity[i])


def _ranking(values: np.ndarray, items: np.ndarray) -> np.ndarray:
    return items[np.lexsort((items, -values))]


@dataclass
class LemmaResult:
    holds: bool
    by_label: np.ndarray
    by_preference: np.ndarray


def lemma1_check(model: SyntheticCausalModel, u: int, items, z_tolerance: int = 0) -> LemmaResult:
    """Compare the ranking of ``items`` by soft label with the ranking by PEM.

    All items must share one popularity value; ``z_tolerance`` > 0 relaxes
    that to a spread of at most ``z_tolerance`` (where the orderings may
    legitimately disagree).
    """
    items = np.asarray(items, dtype=np.int64)
    z = model.popularity[items]
    if items.size and int(z.max() - z.min()) > z_tolerance:
        raise ValueError(f"items span popularity {z.min()}..{z.max()}, beyond tolerance {z_tolerance}")
    by_label = _ranking(model.outcome(u, items), items)
    by_pref = _ranking(path_effect_m(model, u, items), items)
    return LemmaResult(bool(np.array_equal(by_label, by_pref)), by_label, by_pref)


def lemma1_check_all(model: SyntheticCausalModel, strata=None) -> tuple[int, int]:
    """:func:`lemma1_check` for every (user, stratum) at once; returns (checks, passed)."""
    if strata is None:
        strata = equal_popularity_strata(model)
    ref = model.reference_item
    labels = model.soft_labels
    checks = passed = 0
    for items in strata:
        if len(np.unique(model.popularity[items])) > 1:
            raise ValueError("stratum mixes popularity values")
        idx = np.broadcast_to(items, (model.num_users, len(items)))
        y = labels[:, items]
        # PEM_i = Y(u, i) - Y(u, i*; Z <- Z_i), evaluated through the structural equation
        pem = y - model.outcome(np.arange(model.num_users)[:, None], ref, z=model.popularity[items][None, :])
        by_label = np.lexsort((idx, -y), axis=-1)
        by_pref = np.lexsort((idx, -pem), axis=-1)
        checks += model.num_users
        passed += int(np.all(by_label == by_pref, axis=1).sum())
    return checks, passed


def equal_popularity_strata(model: SyntheticCausalModel, min_size: int = 1) -> list[np.ndarray]:
    out = []
    for z in np.unique(model.popularity):
        items = np.flatnonzero(model.popularity == z)
        if len(items) >= min_size:
            out.append(items)
    return out


def inversion_rate(model: SyntheticCausalModel, u: int) -> float:
    """Fraction of item pairs ordered differently by soft label and by true affinity."""
    y = model.soft_labels[u]
    m = model.affinity[u]
    dy = np.sign(y[:, None] - y[None, :])
    dm = np.sign(m[:, None] - m[None, :])
    n = len(y)
    return float((dy * dm < 0).sum() / (n * (n - 1)))


def top_decile_share(model: SyntheticCausalModel, n: int = 10) -> float:
    """Average share of each user's top-n-by-soft-label items that sit in the top popularity decile."""
    k = max(1, int(np.ceil(model.num_items / 10)))
    decile = np.zeros(model.num_items, dtype=bool)
    decile[np.lexsort((np.arange(model.num_items), -model.popularity))[:k]] = True
    y = model.soft_labels
    top = np.argsort(-y, axis=1, kind="stable")[:, :n]
    return float(decile[top].mean())


def bias_report(gammas, num_users: int = 50, num_items: int = 200, seeds=range(20),
                n: int = 10, **kwargs) -> list[dict]:
    """Per-gamma mean inversion rate and top-decile share of top-n, averaged over seeds."""
    rows = []
    for gamma in gammas:
        inv, share = [], []
        for seed in seeds:
            model = generate(num_users, num_items, gamma=gamma, seed=seed, **kwargs)
            inv.append(np.mean([inversion_rate(model, u) for u in range(model.num_users)]))
            share.append(top_decile_share(model, n))
        rows.append({"gamma": gamma, "inversion_rate": float(np.mean(inv)),
                     "popular_share_top10": float(np.mean(share))})
    return rows


def write_bias_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["gamma", "inversion_rate", "popular_share_top10"],
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({"gamma": r["gamma"], "inversion_rate": f"{r['inversion_rate']:.6f}",
                             "popular_share_top10": f"{r['popular_share_top10']:.6f}"})
