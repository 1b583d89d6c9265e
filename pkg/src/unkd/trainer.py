"""BPR training with Adam and validation-NDCG early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .backbone import EmbeddingModel
from .distill import combined_objective
from .evaluation import validation_ndcg

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, log: list[dict] | None = None):
        super().__init__(message)
        self.log = log or []


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    l2_coeff: float = 0.0001
    batch_size: int = 2048
    max_epochs: int = 1000
    patience_epochs: int = 100
    seed: int = 0
    eval_n: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: EmbeddingModel, **kwargs) -> "AdamState":
        params = model.parameters()
        return cls(first={k: np.zeros_like(v) for k, v in params.items()},
                   second={k: np.zeros_like(v) for k, v in params.items()}, **kwargs)


def adam_update(model: EmbeddingModel, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place. Invalidates any propagation cache."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, param in model.parameters().items():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")
        m, v = state.first[name], state.second[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.invalidate()


def _membership_keys(dataset) -> np.ndarray:
    users, items = dataset.train_pairs()
    return np.sort(users * dataset.num_items + items)


def sample_bpr_triplets(dataset, rng: np.random.Generator, users: np.ndarray | None = None,
                        keys: np.ndarray | None = None):
    """(u, i+, i-) triples.

    With ``users`` given, one triple per listed user with i+ uniform over the
    user's training items. Otherwise one triple per training interaction, in
    random order. i- is uniform over items outside the user's training set;
    users who interacted with every item are skipped.
    """
    n = dataset.num_items
    if keys is None:
        keys = _membership_keys(dataset)
    if users is None:
        u, p = dataset.train_pairs()
        perm = rng.permutation(len(u))
        u, p = u[perm], p[perm]
    else:
        users = np.asarray(users, dtype=np.int64)
        sizes = np.array([len(dataset.train[x]) for x in users])
        if np.any(sizes == 0):
            raise ValueError("user without training positives")
        picks = (rng.random(len(users)) * sizes).astype(np.int64)
        u = users
        p = np.array([dataset.train[x][k] for x, k in zip(users, picks)], dtype=np.int64)
    full = np.array([len(t) >= n for t in dataset.train])
    if full.any():
        keep = ~full[u]
        u, p = u[keep], p[keep]
    neg = rng.integers(0, n, size=len(u))
    bad = np.flatnonzero(_is_member(keys, u * n + neg))
    while bad.size:
        neg[bad] = rng.integers(0, n, size=bad.size)
        bad = bad[_is_member(keys, u[bad] * n + neg[bad])]
    return u, p, neg


def _is_member(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_keys, query)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == query


def bpr_loss_and_grad(model: EmbeddingModel, users: np.ndarray, pos: np.ndarray, neg: np.ndarray,
                      l2_coeff: float):
    """Mean over triples of -log sigmoid(s(u,i+) - s(u,i-)) + l2 * (|e_u|^2 + |e_i+|^2 + |e_i-|^2).

    The L2 term acts on the parameter rows of the triple (ego embeddings for
    LightGCN). Returns (loss, grad_user, grad_item).
    """
    user_f, item_f = model.final_embeddings()
    dtype = user_f.dtype
    b = len(users)
    eu, ep, en = user_f[users], item_f[pos], item_f[neg]
    diff = np.einsum("ij,ij->i", eu, ep - en)
    loss = float(np.logaddexp(0.0, -diff.astype(np.float64)).mean())
    coef = (-expit(-diff) / b).astype(dtype)[:, None]
    g_user = np.zeros_like(model.user_emb)
    g_item = np.zeros_like(model.item_emb)
    np.add.at(g_user, users, coef * (ep - en))
    np.add.at(g_item, pos, coef * eu)
    np.add.at(g_item, neg, -coef * eu)
    g_user, g_item = model.backprop(g_user, g_item)
    if l2_coeff:
        pu, pp, pn = model.user_emb[users], model.item_emb[pos], model.item_emb[neg]
        reg = (np.einsum("ij,ij->", pu, pu, dtype=np.float64) + np.einsum("ij,ij->", pp, pp, dtype=np.float64)
               + np.einsum("ij,ij->", pn, pn, dtype=np.float64))
        loss += l2_coeff * float(reg) / b
        scale = dtype.type(2.0 * l2_coeff / b)
        np.add.at(g_user, users, scale * pu)
        np.add.at(g_item, pos, scale * pp)
        np.add.at(g_item, neg, scale * pn)
    if not math.isfinite(loss):
        raise TrainingDiverged("non-finite BPR loss")
    return loss, g_user, g_item


LOG_COLUMNS = ("epoch", "train_loss", "valid_ndcg10", "elapsed_seconds")


def write_training_log(log: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for row in log:
            writer.writerow({"epoch": row["epoch"], "train_loss": f"{row['train_loss']:.8f}",
                             "valid_ndcg10": f"{row['valid_ndcg10']:.8f}",
                             "elapsed_seconds": f"{row['elapsed_seconds']:.3f}"})


def fit(model: EmbeddingModel, dataset, config: TrainConfig, distiller=None, validate=None):
    """Train ``model`` in place and return (best model copy, per-epoch log).

    Each epoch visits every training interaction once as a BPR triple in
    mini-batches. With a ``distiller`` (see :mod:`unkd.distill`) each batch
    also carries the distillation term of a matching user chunk, weighted by
    ``distiller.lam``. The BPR term is scaled by the mean number of triples
    per user, so that like the distillation term it is a per-user sum
    averaged over users. After every epoch the validation NDCG@10 decides
    early stopping; the best epoch's parameters are returned.
    ``validate`` overrides the validation metric (a callable on the model).
    """
    if validate is None:
        if sum(len(v) for v in dataset.valid) == 0:
            raise ValueError("validation split is empty")

        def validate(m):
            return validation_ndcg(m, dataset, config.eval_n)

    rng = np.random.default_rng([config.seed, 0xB1])
    keys = _membership_keys(dataset)
    state = AdamState.for_model(model)
    model.refresh()
    best = model.copy()
    best_score = -math.inf
    best_epoch = 0
    log: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        users, pos, neg = sample_bpr_triplets(dataset, rng, keys=keys)
        n_batches = max(1, math.ceil(len(users) / config.batch_size))
        per_user = len(users) / max(1, np.count_nonzero(np.bincount(users)))
        if distiller is not None:
            distiller.start_epoch(epoch)
            user_chunks = distiller.user_batches(n_batches)
        total = 0.0
        for b in range(n_batches):
            sl = slice(b * config.batch_size, (b + 1) * config.batch_size)
            loss, g_user, g_item = bpr_loss_and_grad(model, users[sl], pos[sl], neg[sl], config.l2_coeff)
            result = (per_user * loss, per_user * g_user, per_user * g_item)
            if distiller is not None:
                result = combined_objective(result, distiller.loss_and_grad(model, user_chunks[b]),
                                            distiller.lam)
            loss, g_user, g_item = result
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", log)
            total += loss
            adam_update(model, {"user": g_user, "item": g_item}, state, config.learning_rate)
            model.refresh()
        if not (np.isfinite(model.user_emb).all() and np.isfinite(model.item_emb).all()):
            raise TrainingDiverged(f"non-finite parameters at epoch {epoch}", log)
        score = float(validate(model))
        log.append({"epoch": epoch, "train_loss": total / n_batches, "valid_ndcg10": score,
                    "elapsed_seconds": time.perf_counter() - t0})
        if score > best_score:
            best_score, best_epoch = score, epoch
            best = model.copy()
        elif epoch - best_epoch >= config.patience_epochs:
            break
        if epoch % 10 == 0:
            logger.info("epoch %d loss %.5f valid ndcg %.5f (best %.5f @ %d)",
                        epoch, total / n_batches, score, best_score, best_epoch)
    best.refresh()
    return best, log
