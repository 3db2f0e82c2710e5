"""Nearest-neighbor retrieval over unit-norm embeddings and geographic recall.

The index is exact: every query is compared against every database
vector (L2 on the unit sphere), with ties broken toward the smaller
database id so results are reproducible bit for bit.  Recall@N asks
whether any of the N nearest database samples lies within a threshold
distance of the query's true position; it is monotone in N by
construction and reaches its ceiling at N = database size, where it
measures pure geography, independent of the embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, EncoderState, forward
from .geodata import GeoDataset, Position, distance_m
from .losses import DegenerateInputError

__all__ = ["EmbeddingIndex", "RecallReport", "build_index", "knn", "recall_at_n"]


def _normalize_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    small = norms <= 1e-12
    if np.any(small):
        row = int(np.argmax(small))
        raise DegenerateInputError(f"{what} row {row} has zero norm")
    return x / norms


@dataclass
class EmbeddingIndex:
    ids: np.ndarray  # (M,) int64, unique
    vectors: np.ndarray  # (M, D) float64, unit rows
    positions: list[Position]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.ids.shape[0]:
            raise ValueError("ids and vectors disagree in length")
        if len(self.positions) != self.ids.shape[0]:
            raise ValueError("ids and positions disagree in length")
        if self.ids.shape[0] == 0:
            raise ValueError("index cannot be empty")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("index vectors must be unit norm")

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def build_index(state: EncoderState, cfg: EncoderConfig, ds: GeoDataset) -> EmbeddingIndex:
    """Embed the whole database in eval mode, ascending id order."""
    samples = sorted(ds.database, key=lambda s: s.id)
    feats = np.stack([s.features for s in samples])
    emb = forward(state, cfg, feats, branch="online", training=False).data
    return EmbeddingIndex(
        ids=np.array([s.id for s in samples]),
        vectors=_normalize_rows(emb, "database embedding"),
        positions=[s.position for s in samples],
    )


def knn(index: EmbeddingIndex, query_vecs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest database rows per query.

    Returns (ids, dists), each (Q, k'), where k' = min(k, index size).
    Queries are row-normalized here; distances are L2 on the sphere.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    q = np.asarray(query_vecs, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"query matrix must be 2-d, got shape {q.shape}")
    if q.shape[1] != index.dim:
        raise ValueError(f"query dim {q.shape[1]} does not match index dim {index.dim}")
    q = _normalize_rows(q, "query embedding")
    k = min(k, index.size)
    # Differences computed directly: the sphere identity 2 - 2 q.v loses
    # digits to cancellation near zero distance and can reorder near-ties.
    dists = np.linalg.norm(q[:, None, :] - index.vectors[None, :, :], axis=2)
    out_ids = np.empty((q.shape[0], k), dtype=np.int64)
    out_d = np.empty((q.shape[0], k), dtype=np.float64)
    for row in range(q.shape[0]):
        order = np.lexsort((index.ids, dists[row]))[:k]
        out_ids[row] = index.ids[order]
        out_d[row] = dists[row][order]
    return out_ids, out_d


@dataclass(frozen=True)
class RecallReport:
    n_values: tuple[int, ...]
    recalls: tuple[float, ...]
    threshold_m: float
    n_queries: int

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.n_values, self.recalls))


def recall_at_n(
    index: EmbeddingIndex,
    query_vecs: np.ndarray,
    query_positions: list[Position],
    n_values: tuple[int, ...] = (1, 5, 10),
    threshold_m: float = 25.0,
) -> RecallReport:
    """Fraction of queries whose top-N retrieval hits true geography.

    A query succeeds at N when any of its N nearest database samples lies
    within ``threshold_m`` meters of the query position.  Queries with no
    database sample inside the threshold can never succeed and still
    count in the denominator.
    """
    if len(query_positions) == 0:
        raise ValueError("recall needs at least one query")
    if len(query_positions) != np.asarray(query_vecs).shape[0]:
        raise ValueError("query vectors and positions disagree in length")
    if list(n_values) != sorted(set(n_values)) or n_values[0] < 1:
        raise ValueError("n_values must be ascending unique positive ints")
    ids, _ = knn(index, query_vecs, k=max(n_values))
    pos_by_id = {int(i): p for i, p in zip(index.ids, index.positions)}
    hits = np.zeros((len(query_positions), ids.shape[1]), dtype=bool)
    for qi, qpos in enumerate(query_positions):
        for rank in range(ids.shape[1]):
            d = distance_m(qpos, pos_by_id[int(ids[qi, rank])])
            hits[qi, rank] = d <= threshold_m
    any_hit = np.cumsum(hits, axis=1) > 0
    recalls = []
    for n in n_values:
        col = min(n, ids.shape[1]) - 1
        recalls.append(float(np.mean(any_hit[:, col])))
    return RecallReport(
        n_values=tuple(int(n) for n in n_values),
        recalls=tuple(recalls),
        threshold_m=float(threshold_m),
        n_queries=len(query_positions),
    )
