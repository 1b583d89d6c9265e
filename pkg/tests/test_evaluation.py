import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import make_dataset
from unkd.backbone import EmbeddingModel
from unkd.distill import partition_items
from unkd.evaluation import (EvalReport, evaluate_model, group_recall, ideal_share, ndcg_at_n, popularity_share,
                             rank_users, recall_at_n, report_rows, validation_ndcg, write_report_csv)


def test_recall_examples():
    assert recall_at_n([0, 1], {1, 2}, 2) == 0.5
    assert recall_at_n([3, 1, 2], {1, 3}, 3) == 1.0
    with pytest.raises(ValueError):
        recall_at_n([1], set(), 1)


def test_ndcg_examples():
    assert ndcg_at_n([0, 1], {1}, 2) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert ndcg_at_n([0, 1], {1}, 2) == pytest.approx(0.63093, abs=1e-5)
    assert ndcg_at_n([4, 0], {4}, 2) == 1.0
    assert ndcg_at_n([0, 1], {7}, 2) == 0.0
    assert ndcg_at_n([2, 5, 1], {2, 5, 1}, 3) == 1.0


def test_group_recall_examples():
    assert group_recall([0, 5], {0, 1}, {0}, 2) == 1.0
    assert group_recall([0, 5], {0, 1, 2}, {0, 1}, 2) == 0.5
    with pytest.raises(ValueError):
        group_recall([0], {1}, {2}, 1)


def test_share_examples():
    assert popularity_share([[0, 1], [1, 0]], {0, 1}, 2) == 1.0
    assert popularity_share([[0, 5], [6, 7]], {0}, 2) == 0.25
    assert ideal_share([[0, 1], [2]], {0}) == pytest.approx(1 / 3)


@settings(max_examples=200, deadline=None)
@given(top=st.lists(st.integers(0, 49), max_size=20, unique=True), rel=st.sets(st.integers(0, 49), min_size=1),
       group=st.sets(st.integers(0, 49)), n=st.integers(1, 20))
def test_metrics_match_set_oracles(top, rel, group, n):
    head = top[:n]
    assert recall_at_n(top, rel, n) == len(set(head) & rel) / len(rel)
    if rel & group:
        assert group_recall(top, rel, group, n) == recall_at_n(top, rel & group, n)
    assert 0.0 <= ndcg_at_n(top, rel, n) <= 1.0


@settings(max_examples=100, deadline=None)
@given(lists=st.lists(st.lists(st.integers(0, 9), max_size=5, unique=True), max_size=6),
       group=st.sets(st.integers(0, 9)), n=st.integers(1, 5))
def test_share_matches_slot_count(lists, group, n):
    slots = [i for top in lists for i in top[:n]]
    expected = sum(1 for i in slots if i in group) / len(slots) if slots else 0.0
    assert popularity_share(lists, group, n) == expected


def oracle_report(scores, ds, groups, n):
    """Exhaustive reference: sort every candidate in Python and count hits by hand."""
    recalls, ndcgs, g_rec = [], [], {0: [], 1: []}
    slots, g_slots, test_all = 0, [0, 0], []
    for u in range(ds.num_users):
        test = set(ds.test[u].tolist())
        if not test:
            continue
        seen = set(ds.train[u].tolist()) | set(ds.valid[u].tolist())
        cands = sorted((i for i in range(ds.num_items) if i not in seen), key=lambda i: (-scores[u][i], i))
        top = cands[:n]
        hits = [i for i in top if i in test]
        recalls.append(len(hits) / len(test))
        dcg = sum(1 / math.log2(k + 2) for k, i in enumerate(top) if i in test)
        idcg = sum(1 / math.log2(k + 2) for k in range(min(len(test), n)))
        ndcgs.append(dcg / idcg)
        slots += len(top)
        test_all += list(test)
        for g in (0, 1):
            members = set(groups[g])
            g_slots[g] += sum(1 for i in top if i in members)
            rel_g = test & members
            if rel_g:
                g_rec[g].append(len(set(top) & rel_g) / len(rel_g))
    names = ("popular", "unpopular")
    return {
        "recall": sum(recalls) / len(recalls), "ndcg": sum(ndcgs) / len(ndcgs), "users": len(recalls),
        "group_recall": {names[g]: (sum(g_rec[g]) / len(g_rec[g]) if g_rec[g] else 0.0) for g in (0, 1)},
        "group_users": {names[g]: len(g_rec[g]) for g in (0, 1)},
        "share": {names[g]: g_slots[g] / slots for g in (0, 1)},
        "ideal": {names[g]: sum(1 for i in test_all if i in set(groups[g])) / len(test_all) for g in (0, 1)},
    }


def random_instance(rng):
    m, n = int(rng.integers(2, 6)), int(rng.integers(4, 11))
    train, valid, test = [], [], []
    for _ in range(m):
        perm = rng.permutation(n)
        a, b, c = int(rng.integers(1, 3)), int(rng.integers(0, 2)), int(rng.integers(0, 3))
        train.append(perm[:a])
        valid.append(perm[a:a + b])
        test.append(perm[a + b:a + b + c])
    if not any(len(t) for t in test):
        test[0] = np.array([i for i in range(n) if i not in set(train[0]) | set(valid[0])][:1])
    ds = make_dataset(train, num_items=n, valid=valid, test=test)
    ds.popularity[:] = rng.integers(1, 6, n)
    # integer scores force plenty of ties
    scores = rng.integers(0, 3, (m, n)).astype(np.float64)
    return ds, scores


def score_model(scores):
    m, n = scores.shape
    # one-hot user rows times the score matrix reproduce the scores exactly
    return EmbeddingModel(np.eye(m), scores.T.copy())


@pytest.mark.parametrize("seed", range(40))
def test_evaluate_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    ds, scores = random_instance(rng)
    part = partition_items(ds.popularity, 2)
    n = int(rng.integers(1, 5))
    report = evaluate_model(score_model(scores), ds, part, n=n)
    ref = oracle_report(scores, ds, [g.tolist() for g in part.groups], n)
    assert report.recall == pytest.approx(ref["recall"], abs=1e-12)
    assert report.ndcg == pytest.approx(ref["ndcg"], abs=1e-12)
    assert report.num_users == ref["users"]
    assert report.group_users == ref["group_users"]
    for key, name in (("group_recall", "group_recall"), ("share", "share"), ("ideal", "ideal_share")):
        for g, v in ref[key].items():
            assert getattr(report, name)[g] == pytest.approx(v, abs=1e-12)


def test_group_hits_add_up():
    rng = np.random.default_rng(3)
    ds, scores = random_instance(rng)
    part = partition_items(ds.popularity, 2)
    top = rank_users(score_model(scores), ds, 3)
    member = part.item_group()
    for u in range(ds.num_users):
        hits = [i for i in top[u] if i >= 0 and i in set(ds.test[u].tolist())]
        assert sum(member[i] == 0 for i in hits) + sum(member[i] == 1 for i in hits) == len(hits)


def test_hand_computed_three_users():
    # items 0,1 popular; 2,3,4 unpopular
    ds = make_dataset([[0], [1], [0, 1]], num_items=5, valid=[[], [2], []], test=[[1, 2], [3], [4]])
    ds.popularity[:] = [4, 4, 1, 1, 1]
    part = partition_items(ds.popularity, 2)
    assert [g.tolist() for g in part.groups] == [[0, 1], [2, 3, 4]]
    scores = np.array([[9, 1, 5, 0, 0],    # u0 candidates 1..4 -> top2 = [2, 1]
                       [0, 9, 9, 2, 3],    # u1 candidates 0,3,4 -> top2 = [4, 3]
                       [0, 0, 1, 1, 1.0]])  # u2 candidates 2,3,4 -> top2 = [2, 3]
    r = evaluate_model(score_model(scores), ds, part, n=2)
    assert r.recall == pytest.approx((1.0 + 1.0 + 0.0) / 3)
    assert r.ndcg == pytest.approx((1.0 + (1 / math.log2(3)) + 0.0) / 3)
    assert r.group_recall == {"popular": 1.0, "unpopular": pytest.approx(2 / 3)}
    assert r.group_users == {"popular": 1, "unpopular": 3}
    assert r.share["popular"] == pytest.approx(1 / 6)
    assert r.ideal_share["popular"] == pytest.approx(1 / 4)


def test_evaluate_is_deterministic():
    ds, scores = random_instance(np.random.default_rng(8))
    part = partition_items(ds.popularity, 2)
    model = score_model(scores)
    assert evaluate_model(model, ds, part) == evaluate_model(model, ds, part)


def test_popularity_scorer_favors_popular_group():
    rng = np.random.default_rng(0)
    m, n = 300, 60
    pop = rng.zipf(1.6, n).clip(max=200).astype(float)
    prob = pop / pop.sum()
    train, test = [], []
    for _ in range(m):
        items = rng.choice(n, 12, replace=False, p=prob)
        train.append(items[:10])
        test.append(items[10:])
    ds = make_dataset(train, num_items=n, test=test)
    part = partition_items(ds.popularity, 2)
    model = EmbeddingModel(np.ones((m, 1)), ds.popularity[:, None].astype(np.float64))
    r = evaluate_model(model, ds, part)
    assert r.group_recall["unpopular"] <= r.group_recall["popular"]


def test_requires_two_groups():
    ds, scores = random_instance(np.random.default_rng(1))
    with pytest.raises(ValueError):
        evaluate_model(score_model(scores), ds, partition_items(ds.popularity, 1))


def test_validation_ndcg_excludes_train_only():
    ds = make_dataset([[0]], num_items=3, valid=[[1]], test=[[2]])
    model = score_model(np.array([[9.0, 1.0, 5.0]]))
    assert validation_ndcg(model, ds, n=1) == 0.0
    assert validation_ndcg(model, ds, n=2) == pytest.approx(1 / math.log2(3))


def test_report_csv(tmp_path):
    report = EvalReport(n=10, recall=0.25, ndcg=0.5, num_users=4, group_recall={"popular": 0.3, "unpopular": 0.1},
                        group_users={"popular": 4, "unpopular": 2}, share={"popular": 0.9, "unpopular": 0.1},
                        ideal_share={"popular": 0.7, "unpopular": 0.3})
    rows = report_rows(report, "toy", "mf", "unkd", 0)
    write_report_csv(rows, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "dataset,backbone,method,metric,group,N,value,seed"
    assert "toy,mf,unkd,recall,overall,10,0.250000,0" in lines
    assert "toy,mf,unkd,users,unpopular,10,2,0" in lines
    assert all(0 <= float(l.split(",")[6]) <= 1 for l in lines[1:] if ",users," not in l)
