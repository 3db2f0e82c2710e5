"""Batch construction: query-positive pairs, identical-negative pairs,
and triplets with three negative-selection modes.

Pair-based methods train on two-view batches.  A batch is ``m_q``
query-positive pairs plus ``round(eta * m_q)`` identical-negative pairs,
where an identical pair presents the same database sample on both
branches.  ``eta`` is the database-negative ratio; at 0 the batch is pure
query-positive pairs.  Identical negatives are drawn from the database
minus every sampled query's positive set, so a negative can never be a
positive partner in the same batch.

Triplet construction mines a hard negative per query either against the
full database (``FULL_HNM``), against a fixed random candidate pool
(``PARTIAL_HNM``), or uniformly (``RANDOM``).  All randomness flows from
one generator per call, so identical seeds give identical batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .costmodel import CostLedger
from .geodata import GeoDataset, distance_m

__all__ = [
    "PairKind",
    "Pair",
    "Triplet",
    "MiningMode",
    "MiningConfig",
    "build_pairs",
    "mine_triplets",
    "hardest_negative",
]


class PairKind(Enum):
    QUERY_POSITIVE = "query_positive"
    IDENTICAL_NEGATIVE = "identical_negative"


@dataclass(frozen=True)
class Pair:
    anchor_id: int
    partner_id: int
    kind: PairKind

    def __post_init__(self):
        if self.kind is PairKind.IDENTICAL_NEGATIVE and self.anchor_id != self.partner_id:
            raise ValueError("identical-negative pairs must repeat one sample")


@dataclass(frozen=True)
class Triplet:
    anchor_id: int
    positive_id: int
    negative_id: int


class MiningMode(Enum):
    FULL_HNM = "full_hnm"
    PARTIAL_HNM = "partial_hnm"
    RANDOM = "random"


@dataclass(frozen=True)
class MiningConfig:
    mode: MiningMode = MiningMode.RANDOM
    pool_size: int = 0

    def __post_init__(self):
        if self.mode is MiningMode.PARTIAL_HNM and self.pool_size < 1:
            raise ValueError("partial mining needs pool_size >= 1")


def _eligible_queries(ds: GeoDataset, need_negatives: bool) -> list[int]:
    out = []
    for q in ds.queries:
        if not ds.positive_set(q.id):
            continue
        if need_negatives and not ds.negative_set(q.id):
            continue
        out.append(q.id)
    return out


def build_pairs(
    ds: GeoDataset,
    m_q: int,
    eta: float,
    rng_seed: int,
    ledger: CostLedger | None = None,
    verify_positives: bool = False,
) -> list[Pair]:
    """Assemble one epoch batch of pairs at database-negative ratio eta.

    Returns exactly ``m_q + round(eta * m_q)`` pairs in a seeded shuffle.
    The ledger counts one anchor and one partner extraction per pair and
    no comparisons; ``verify_positives`` additionally distance-checks
    every sampled query against every extracted positive partner, which
    is the all-pairs verification sweep (``m_q * m_q`` comparisons).
    """
    if m_q < 1:
        raise ValueError("m_q must be at least 1")
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    rng = np.random.default_rng(rng_seed)

    candidates = _eligible_queries(ds, need_negatives=False)
    if len(candidates) < m_q:
        raise ValueError(
            f"need {m_q} queries with at least one positive, dataset has {len(candidates)}"
        )
    chosen = rng.choice(len(candidates), size=m_q, replace=False)
    query_ids = [candidates[i] for i in chosen]

    pairs: list[Pair] = []
    banned: set[int] = set()
    for qid in query_ids:
        positives = ds.positive_set(qid)
        banned.update(positives)
        partner = positives[int(rng.integers(len(positives)))]
        pairs.append(Pair(qid, partner, PairKind.QUERY_POSITIVE))

    n_neg = int(round(eta * m_q))
    if n_neg > 0:
        eligible = sorted(s.id for s in ds.database if s.id not in banned)
        if len(eligible) < n_neg:
            raise ValueError(
                f"need {n_neg} identical negatives, only {len(eligible)} database "
                "samples sit outside the sampled queries' positive sets"
            )
        picks = rng.choice(len(eligible), size=n_neg, replace=False)
        for i in picks:
            nid = eligible[int(i)]
            pairs.append(Pair(nid, nid, PairKind.IDENTICAL_NEGATIVE))

    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]

    if verify_positives:
        partners = [p for p in pairs if p.kind is PairKind.QUERY_POSITIVE]
        for p in partners:
            q_pos = ds.sample(p.anchor_id).position
            for other in partners:
                d = distance_m(q_pos, ds.sample(other.partner_id).position)
                if other is p and d > ds.r_pos:
                    raise AssertionError(
                        f"pair ({p.anchor_id}, {p.partner_id}) is {d:.1f} m apart"
                    )
        if ledger is not None:
            ledger.add_comparisons(len(partners) * len(partners))

    if ledger is not None:
        ledger.add_extractions(2 * len(pairs))
        ledger.note_cached(2 * len(pairs))
    return pairs


def hardest_negative(
    query_vec: np.ndarray, candidate_ids: list[int], candidate_vecs: np.ndarray
) -> int:
    """Id of the closest candidate by L2 on normalized vectors.

    Ties break toward the smallest id.  Raises on an empty candidate set.
    """
    if len(candidate_ids) == 0:
        raise ValueError("no candidates to mine from")
    if candidate_vecs.shape[0] != len(candidate_ids):
        raise ValueError("candidate ids and vectors disagree in length")
    q = query_vec / max(np.linalg.norm(query_vec), 1e-12)
    norms = np.linalg.norm(candidate_vecs, axis=1, keepdims=True)
    c = candidate_vecs / np.maximum(norms, 1e-12)
    dists = np.linalg.norm(c - q[None, :], axis=1)
    best = np.lexsort((candidate_ids, dists))[0]
    return int(candidate_ids[best])


def mine_triplets(
    ds: GeoDataset,
    m_q: int,
    cfg: MiningConfig,
    embed: Callable[[np.ndarray], np.ndarray],
    rng_seed: int,
    ledger: CostLedger | None = None,
) -> list[Triplet]:
    """Build ``m_q`` (query, positive, negative) triplets.

    ``embed`` maps a stacked feature matrix to embeddings and is only
    invoked for the mining modes that need it.  Positives are uniform
    over each query's positive set.  ``FULL_HNM`` embeds the sampled
    queries plus the whole database and takes each query's nearest
    eligible negative; ``PARTIAL_HNM`` does the same against one shared
    random candidate pool, falling back to a uniform negative for any
    query whose eligible negatives missed the pool; ``RANDOM`` skips
    embedding entirely.
    """
    if m_q < 1:
        raise ValueError("m_q must be at least 1")
    rng = np.random.default_rng(rng_seed)

    candidates = _eligible_queries(ds, need_negatives=True)
    if len(candidates) < m_q:
        raise ValueError(
            f"need {m_q} queries with positives and negatives, dataset has {len(candidates)}"
        )
    chosen = rng.choice(len(candidates), size=m_q, replace=False)
    query_ids = [candidates[i] for i in chosen]
    positive_ids = []
    for qid in query_ids:
        positives = ds.positive_set(qid)
        positive_ids.append(positives[int(rng.integers(len(positives)))])

    triplets: list[Triplet] = []
    if cfg.mode is MiningMode.RANDOM:
        for qid, pid in zip(query_ids, positive_ids):
            negs = ds.negative_set(qid)
            nid = negs[int(rng.integers(len(negs)))]
            triplets.append(Triplet(qid, pid, nid))
        return triplets

    q_feats = np.stack([ds.sample(q).features for q in query_ids])

    if cfg.mode is MiningMode.FULL_HNM:
        db_ids = sorted(s.id for s in ds.database)
        db_feats = np.stack([ds.sample(i).features for i in db_ids])
        q_emb = embed(q_feats)
        db_emb = embed(db_feats)
        if ledger is not None:
            ledger.add_extractions(m_q + len(db_ids))
            ledger.note_cached(m_q + len(db_ids))
        emb_by_id = {i: db_emb[k] for k, i in enumerate(db_ids)}
        for k, (qid, pid) in enumerate(zip(query_ids, positive_ids)):
            negs = ds.negative_set(qid)
            vecs = np.stack([emb_by_id[i] for i in negs])
            nid = hardest_negative(q_emb[k], negs, vecs)
            if ledger is not None:
                ledger.add_comparisons(len(negs))
            triplets.append(Triplet(qid, pid, nid))
        return triplets

    # PARTIAL_HNM: one shared candidate pool per call.
    db_ids = sorted(s.id for s in ds.database)
    if cfg.pool_size > len(db_ids):
        raise ValueError(
            f"pool_size {cfg.pool_size} exceeds database size {len(db_ids)}"
        )
    pool_pick = rng.choice(len(db_ids), size=cfg.pool_size, replace=False)
    pool_ids = [db_ids[int(i)] for i in pool_pick]
    pool_feats = np.stack([ds.sample(i).features for i in pool_ids])
    q_emb = embed(q_feats)
    pool_emb = embed(pool_feats)
    if ledger is not None:
        ledger.add_extractions(m_q + cfg.pool_size + m_q)  # queries + pool + positives
        ledger.note_cached(m_q + cfg.pool_size + m_q)
    for k, (qid, pid) in enumerate(zip(query_ids, positive_ids)):
        # Every pool member is distance-checked, then geometric eligibility
        # masks out anything not strictly beyond the negative radius.
        if ledger is not None:
            ledger.add_comparisons(cfg.pool_size)
        negs = set(ds.negative_set(qid))
        elig = [j for j, i in enumerate(pool_ids) if i in negs]
        if elig:
            ids = [pool_ids[j] for j in elig]
            vecs = pool_emb[elig]
            nid = hardest_negative(q_emb[k], ids, vecs)
        else:
            all_negs = ds.negative_set(qid)
            nid = all_negs[int(rng.integers(len(all_negs)))]
            if ledger is not None:
                ledger.add_extractions(1)  # the fallback negative is fetched fresh
        triplets.append(Triplet(qid, pid, nid))
    return triplets
