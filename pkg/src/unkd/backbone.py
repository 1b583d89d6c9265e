"""MF and LightGCN embedding models.

Both backbones score a (user, item) pair by the inner product of their final
embeddings. For MF the final embeddings are the parameters themselves; for
LightGCN they are the layer-averaged propagation of the parameters over the
normalized user-item graph and are cached until the next parameter update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp

MF = "mf"
LIGHTGCN = "lightgcn"
KINDS = (MF, LIGHTGCN)


class StalePropagationError(RuntimeError):
    """Raised when a LightGCN model is scored after an update without re-propagating."""


class NormalizedGraph:
    """Symmetric-normalized bipartite adjacency over m users followed by n items."""

    def __init__(self, num_users: int, num_items: int, users: np.ndarray, items: np.ndarray):
        self.num_users = num_users
        self.num_items = num_items
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.max() >= num_users or items.max() >= num_items
                           or users.min() < 0 or items.min() < 0):
            raise IndexError("interaction index out of range for graph")
        deg_u = np.bincount(users, minlength=num_users).astype(np.float64)
        deg_i = np.bincount(items, minlength=num_items).astype(np.float64)
        w = 1.0 / np.sqrt(deg_u[users] * deg_i[items]) if users.size else np.zeros(0)
        size = num_users + num_items
        rows = np.concatenate([users, items + num_users])
        cols = np.concatenate([items + num_users, users])
        self.adj = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(size, size))

    @classmethod
    def from_dataset(cls, dataset) -> "NormalizedGraph":
        users, items = dataset.train_pairs()
        return cls(dataset.num_users, dataset.num_items, users, items)

    @property
    def size(self) -> int:
        return self.num_users + self.num_items

    def dense(self) -> np.ndarray:
        return self.adj.toarray()

    def mean_power(self, x: np.ndarray, layers: int) -> np.ndarray:
        """(1/(L+1)) * sum_{l=0..L} A^l x. A is symmetric, so this is also its own adjoint."""
        if x.shape[0] != self.size:
            raise ValueError(f"graph has {self.size} nodes, embeddings have {x.shape[0]} rows")
        acc = x.astype(np.float64, copy=True)
        cur = x
        for _ in range(layers):
            cur = self.adj @ cur
            acc += cur
        return (acc / (layers + 1)).astype(x.dtype, copy=False)


class EmbeddingModel:
    """User/item embedding tables plus backbone kind.

    Parameters are ``user_emb`` (m x d) and ``item_emb`` (n x d). Any code that
    mutates them in place must call :meth:`invalidate`.
    """

    def __init__(self, user_emb: np.ndarray, item_emb: np.ndarray, kind: str = MF,
                 layers: int = 0, graph: NormalizedGraph | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown backbone kind {kind!r}")
        if user_emb.shape[1] != item_emb.shape[1]:
            raise ValueError("user and item embeddings differ in dimension")
        if kind == MF and layers != 0:
            raise ValueError("MF has no propagation layers")
        if layers < 0:
            raise ValueError("layers must be >= 0")
        self.kind = kind
        self.user_emb = user_emb
        self.item_emb = item_emb
        self.layers = layers
        self.graph = graph
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"user": self.user_emb, "item": self.item_emb}

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.user_emb.copy(), self.item_emb.copy(), self.kind,
                              self.layers, self.graph)

    def invalidate(self) -> None:
        self._cache = None

    @property
    def fresh(self) -> bool:
        return self.kind == MF or self._cache is not None

    def refresh(self, graph: NormalizedGraph | None = None) -> None:
        """Recompute the propagated embeddings (no-op for MF)."""
        if graph is not None:
            self.graph = graph
        if self.kind == LIGHTGCN:
            self._cache = propagate(self, self.graph)

    def final_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == MF:
            return self.user_emb, self.item_emb
        if self._cache is None:
            raise StalePropagationError("LightGCN parameters changed since last propagation; call refresh()")
        return self._cache

    def backprop(self, grad_user: np.ndarray, grad_item: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map gradients w.r.t. final embeddings to gradients w.r.t. parameters."""
        if self.kind == MF or self.layers == 0:
            return grad_user, grad_item
        g = self.graph.mean_power(np.vstack([grad_user, grad_item]), self.layers)
        return g[:self.num_users], g[self.num_users:]


def init_embeddings(num_users: int, num_items: int, dim: int, seed: int = 0,
                    init_scale: float = 0.1, kind: str = MF, layers: int = 0,
                    graph: NormalizedGraph | None = None, dtype=np.float32) -> EmbeddingModel:
    if min(num_users, num_items, dim) < 1:
        raise ValueError("num_users, num_items and dim must be >= 1")
    rng = np.random.default_rng(seed)
    user = (rng.standard_normal((num_users, dim)) * init_scale).astype(dtype)
    item = (rng.standard_normal((num_items, dim)) * init_scale).astype(dtype)
    model = EmbeddingModel(user, item, kind=kind, layers=layers if kind == LIGHTGCN else 0, graph=graph)
    if graph is not None:
        model.refresh()
    return model


def propagate(model: EmbeddingModel, graph: NormalizedGraph) -> tuple[np.ndarray, np.ndarray]:
    """Layer-averaged LightGCN propagation of the model's parameters."""
    if graph is None:
        raise ValueError("LightGCN propagation needs a graph")
    if graph.num_users != model.num_users or graph.num_items != model.num_items:
        raise ValueError(
            f"graph is {graph.num_users}x{graph.num_items}, model is {model.num_users}x{model.num_items}")
    if model.layers == 0:
        return model.user_emb, model.item_emb
    out = graph.mean_power(np.vstack([model.user_emb, model.item_emb]), model.layers)
    return out[:model.num_users], out[model.num_users:]


def score(model: EmbeddingModel, u: int, i: int) -> float:
    users, items = model.final_embeddings()
    # Same row-wise reduction as score_all so the two agree bit for bit.
    return float((items[[i]] * users[u]).sum(axis=1, dtype=np.float64)[0])


def score_all(model: EmbeddingModel, u: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Scores of every item for user ``u``; items where ``mask`` is True come back as -inf."""
    users, items = model.final_embeddings()
    scores = (items * users[u]).sum(axis=1, dtype=np.float64)
    if mask is not None:
        scores[mask] = -np.inf
    return scores


def score_users(model: EmbeddingModel, users: np.ndarray) -> np.ndarray:
    user_final, item_final = model.final_embeddings()
    return (user_final[users] @ item_final.T).astype(np.float64)


def rank_items(scores: np.ndarray, n: int, exclude: Iterable[int] = ()) -> np.ndarray:
    """Indices of the ``n`` best scores, descending, ties by ascending index.

    Excluded indices and -inf scores are never returned, so the result may be
    shorter than ``n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = np.asarray(scores, dtype=np.float64).copy()
    excl = np.fromiter(exclude, dtype=np.int64)
    if excl.size:
        scores[excl] = -np.inf
    valid = np.flatnonzero(scores > -np.inf)
    order = np.lexsort((valid, -scores[valid]))
    return valid[order[:n]]


def top_n(model: EmbeddingModel, u: int, n: int, exclude: Iterable[int] = ()) -> np.ndarray:
    return rank_items(score_all(model, u), n, exclude)


def top_n_batch(scores: np.ndarray, n: int) -> np.ndarray:
    """Row-wise :func:`rank_items` for a score matrix with exclusions already set to -inf.

    Rows with fewer than ``n`` finite scores are padded with -1.
    """
    rows, cols = scores.shape
    k = min(n, cols)
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    part_scores = np.take_along_axis(scores, part, axis=1)
    kth = part_scores.min(axis=1)
    # Rows where ties straddle the cut (or -inf fills it) need the exact tie rule.
    ambiguous = ((scores >= kth[:, None]).sum(axis=1) > k) | ~np.isfinite(kth)
    order = np.lexsort((part, -part_scores), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    for r in np.flatnonzero(ambiguous):
        ranked = rank_items(scores[r], k)
        out[r, :] = -1
        out[r, :len(ranked)] = ranked
    if k < n:
        out = np.hstack([out, np.full((rows, n - k), -1, dtype=out.dtype)])
    return out


# Checkpoint: 8-byte magic, then little-endian header
#   uint32 version, uint8 kind (0 = MF, 1 = LightGCN), uint32 m, n, d, layers
# followed by row-major float32 LE user matrix and item matrix.
CHECKPOINT_MAGIC = b"UNKDEMB\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<IBIIII")


def save_checkpoint(model: EmbeddingModel, path) -> None:
    header = _HEADER.pack(CHECKPOINT_VERSION, KINDS.index(model.kind), model.num_users,
                          model.num_items, model.dim, model.layers)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(model.user_emb, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.item_emb, dtype="<f4").tobytes())


def load_checkpoint(path, graph: NormalizedGraph | None = None) -> EmbeddingModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an embedding checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, kind, m, n, d, layers = _HEADER.unpack_from(blob, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += _HEADER.size
    expected = off + 4 * d * (m + n)
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(blob)} bytes, expected {expected})")
    user = np.frombuffer(blob, dtype="<f4", count=m * d, offset=off).reshape(m, d).astype(np.float32)
    item = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off + 4 * m * d).reshape(n, d).astype(np.float32)
    model = EmbeddingModel(user, item, kind=KINDS[kind], layers=layers, graph=graph)
    if graph is not None:
        model.refresh()
    return model


@dataclass
class BackboneSpec:
    kind: str = MF
    dim: int = 10
    layers: int = 2
    init_scale: float = 0.1

    def build(self, dataset, seed: int) -> EmbeddingModel:
        graph = NormalizedGraph.from_dataset(dataset) if self.kind == LIGHTGCN else None
        return init_embeddings(dataset.num_users, dataset.num_items, self.dim, seed=seed,
                               init_scale=self.init_scale, kind=self.kind,
                               layers=self.layers if self.kind == LIGHTGCN else 0, graph=graph)
