import numpy as np
from unkd.dataset import InteractionDataset, compute_popularity


def make_dataset(train, valid=None, test=None, num_items=None):
    """Build an InteractionDataset from per-user item lists."""
    m = len(train)
    valid = valid or [[] for _ in range(m)]
    test = test or [[] for _ in range(m)]
    if num_items is None:
        num_items = 1 + max(max(s, default=-1) for s in list(train) + list(valid) + list(test))
    as_arr = lambda split: [np.array(sorted(s), dtype=np.int64) for s in split]
    tr = as_arr(train)
    return InteractionDataset(m, num_items, tr, as_arr(valid), as_arr(test),
                              compute_popularity(tr, num_items))


def random_dataset(num_users=30, num_items=40, density=0.25, seed=0, skew=1.0):
    """Random interactions with popularity skew; each user gets >= 4 train, 1 valid, 1 test item."""
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, num_items + 1) ** skew
    weights /= weights.sum()
    train, valid, test = [], [], []
    for _ in range(num_users):
        size = max(6, rng.binomial(num_items, density))
        items = rng.choice(num_items, size=min(size, num_items - 1), replace=False, p=weights)
        test.append(items[:1].tolist())
        valid.append(items[1:2].tolist())
        train.append(items[2:].tolist())
    return make_dataset(train, valid, test, num_items=num_items)


def finite_difference(loss_fn, params, h=1e-4):
    """Central differences of ``loss_fn()`` w.r.t. every entry of each array in ``params`` (mutated in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-8))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def dense_propagation(model):
    """Layer-averaged propagation via a dense normalized adjacency (independent of the sparse path)."""
    if model.kind == "mf" or model.layers == 0:
        return model.user_emb, model.item_emb
    a = model.graph.adj.toarray()
    e = np.vstack([model.user_emb, model.item_emb])
    out = sum(np.linalg.matrix_power(a, k) @ e for k in range(model.layers + 1)) / (model.layers + 1)
    return out[:model.num_users], out[model.num_users:]
