"""Recall@N / NDCG@N and Hamming-space evaluation of a code table."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import DataSplit
from .hashing import HashCodeTable
from .retrieval import RetrievalIndex

DEFAULT_NS = (20, 50, 100, 200, 500, 1000)


def recall_at(ranked, relevant, N: int) -> float | None:
    """|top-N & relevant| / |relevant|; None when there is nothing relevant."""
    relevant = set(relevant)
    if not relevant:
        return None
    hits = sum(1 for r in list(ranked)[:N] if r in relevant)
    return hits / len(relevant)


def ndcg_at(ranked, relevant, N: int) -> float | None:
    """Binary-gain NDCG with a log2(rank + 1) discount.

    The ideal list holds min(N, |relevant|) hits, so a perfect top-N scores 1.
    """
    relevant = set(relevant)
    if not relevant:
        return None
    dcg = sum(1.0 / math.log2(i + 2) for i, r in enumerate(list(ranked)[:N]) if r in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(N, len(relevant))))
    return dcg / idcg


@dataclass
class MetricReport:
    ns: tuple
    recall: dict           # N -> mean
    ndcg: dict             # N -> mean
    per_query: dict = field(repr=False, default_factory=dict)  # x -> {("recall", N): v, ...}
    n_queries: int = 0
    fingerprint: str = ""

    def row(self) -> dict:
        out = {"queries": self.n_queries}
        for n in self.ns:
            out[f"recall@{n}"] = self.recall[n]
            out[f"ndcg@{n}"] = self.ndcg[n]
        return out


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate_table(table: HashCodeTable, split: DataSplit, ns=(20,), exclude_train: bool = True,
                   config=None) -> MetricReport:
    """Rank every y-node for each test x by Hamming score and average the metrics.

    Only x-nodes with at least one held-out positive are counted.
    """
    ns = tuple(sorted(ns))
    n1 = split.train.n1
    index = RetrievalIndex.for_second_side(table, n1)
    train_nbrs = split.train.neighbors()
    maxn = max(ns)
    per_query = {}
    for x, rel in split.test_positives.items():
        excl = train_nbrs[x] if exclude_train else None
        res = index.topn(index.query_from_table(table, x), maxn, exclude=excl)
        ranked = res.ids.tolist()
        rel = set(rel.tolist())
        per_query[x] = {}
        for n in ns:
            per_query[x][("recall", n)] = recall_at(ranked, rel, n)
            per_query[x][("ndcg", n)] = ndcg_at(ranked, rel, n)
    nq = len(per_query)
    recall = {n: (float(np.mean([q[("recall", n)] for q in per_query.values()])) if nq else 0.0)
              for n in ns}
    ndcg = {n: (float(np.mean([q[("ndcg", n)] for q in per_query.values()])) if nq else 0.0)
            for n in ns}
    fp = fingerprint(config.to_dict()) if config is not None else ""
    return MetricReport(ns, recall, ndcg, per_query, nq, fp)


def random_recall_expectation(split: DataSplit, N: int, exclude_train: bool = True) -> float:
    """Mean Recall@N of a uniformly random ranking over each query's candidate pool."""
    train_nbrs = split.train.neighbors()
    vals = []
    for x in split.test_positives:
        pool = split.train.n2 - (len(train_nbrs[x]) if exclude_train else 0)
        vals.append(min(N, pool) / pool)
    return float(np.mean(vals)) if vals else 0.0
