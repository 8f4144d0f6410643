"""Bipartite graph model, edge-list ingestion, splitting and normalization.

Nodes of the first side keep indices ``0..n1-1``; a second-side node ``y``
lives at global index ``n1 + y`` so one adjacency and one embedding table
cover the whole graph.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

GRAPH_MAGIC = b"BGRF"
GRAPH_VERSION = 1

_FIELD_SPLIT = re.compile(r"[\t,\s]+")


class GraphError(ValueError):
    pass


class EmptyGraphError(GraphError):
    pass


class EdgeListParseError(GraphError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}: {line.rstrip()!r}")


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Two disjoint node sets joined by a deduplicated, sorted edge list.

    ``x_ids`` / ``y_ids`` map dense indices back to the ids seen at ingest
    (identity when the graph was built in memory).
    """

    n1: int
    n2: int
    edges: np.ndarray
    x_ids: np.ndarray | None = None
    y_ids: np.ndarray | None = None
    _adj: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.n1 < 0 or self.n2 < 0:
            raise GraphError("node counts must be non-negative")
        if len(edges):
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.n1:
                raise GraphError("edge references an x-node outside [0, n1)")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.n2:
                raise GraphError("edge references a y-node outside [0, n2)")
            edges = np.unique(edges, axis=0)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def n_nodes(self) -> int:
        return self.n1 + self.n2

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def density(self) -> float:
        """|E| / (n1 * n2); this is the quantity dataset tables usually print."""
        if self.n1 == 0 or self.n2 == 0:
            return 0.0
        return self.n_edges / (self.n1 * self.n2)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.n1 + self.edges[:, 1], 1)
        return deg

    def isolated(self) -> np.ndarray:
        return np.flatnonzero(self.degrees() == 0)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency over the unified index space."""
        if "A" not in self._adj:
            n = self.n_nodes
            rows = np.concatenate([self.edges[:, 0], self.n1 + self.edges[:, 1]])
            cols = np.concatenate([self.n1 + self.edges[:, 1], self.edges[:, 0]])
            data = np.ones(len(rows), dtype=np.float64)
            A = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
            A.sort_indices()
            self._adj["A"] = A
        return self._adj["A"]

    def neighbors(self) -> list[np.ndarray]:
        """Per x-node sorted array of y-neighbors."""
        if "nbrs" not in self._adj:
            order = np.argsort(self.edges[:, 0], kind="stable")
            xs = self.edges[order, 0]
            ys = self.edges[order, 1]
            bounds = np.searchsorted(xs, np.arange(self.n1 + 1))
            self._adj["nbrs"] = [ys[bounds[i]:bounds[i + 1]] for i in range(self.n1)]
        return self._adj["nbrs"]

    def edge_keys(self) -> np.ndarray:
        """Sorted ``x * n2 + y`` keys, for fast membership tests."""
        return self.edges[:, 0] * self.n2 + self.edges[:, 1]

    def with_edges(self, edges: np.ndarray) -> "BipartiteGraph":
        return BipartiteGraph(self.n1, self.n2, edges, self.x_ids, self.y_ids)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """D^{-1/2} A D^{-1/2} in CSR form; zero-degree rows are simply empty."""

    matrix: sp.csr_matrix
    n1: int
    n_isolated: int

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True, eq=False)
class DataSplit:
    train: BipartiteGraph
    test: BipartiteGraph
    test_ratio: float
    seed: int

    @property
    def test_positives(self) -> dict[int, np.ndarray]:
        nbrs = self.test.neighbors()
        return {x: ys for x, ys in enumerate(nbrs) if len(ys)}


def normalize(g: BipartiteGraph) -> NormalizedAdjacency:
    if g.n_edges == 0:
        raise EmptyGraphError("cannot normalize a graph without edges")
    A = g.adjacency()
    deg = np.asarray(A.sum(axis=1)).ravel()
    coo = A.tocoo()
    # one rounding per entry: 1/sqrt(deg_r * deg_c) rather than a product of two roots
    vals = 1.0 / np.sqrt(deg[coo.row] * deg[coo.col])
    M = sp.csr_matrix((vals, (coo.row, coo.col)), shape=A.shape)
    M.sort_indices()
    n_iso = int((deg == 0).sum())
    if n_iso:
        log.info("normalize: %d isolated node(s) have empty rows", n_iso)
    return NormalizedAdjacency(M, g.n1, n_iso)


def load_edge_list(path, format: str | None = None) -> BipartiteGraph:
    """Read ``x y`` pairs (tab, comma or space separated; ``#`` comments).

    Extra trailing columns (ratings, timestamps) are ignored. Ids are
    densified per side in ascending order.
    """
    path = Path(path)
    if format not in (None, "tsv", "csv"):
        raise GraphError(f"unknown edge-list format {format!r}")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = [p for p in _FIELD_SPLIT.split(s) if p]
            if len(parts) < 2:
                raise EdgeListParseError(path, lineno, line, "expected two integer ids")
            try:
                x, y = int(parts[0]), int(parts[1])
            except ValueError:
                raise EdgeListParseError(path, lineno, line, "ids must be integers") from None
            if x < 0 or y < 0:
                raise EdgeListParseError(path, lineno, line, "ids must be non-negative")
            pairs.append((x, y))
    if not pairs:
        raise EmptyGraphError(f"{path}: no edges")
    raw = np.asarray(pairs, dtype=np.int64)
    x_ids, xs = np.unique(raw[:, 0], return_inverse=True)
    y_ids, ys = np.unique(raw[:, 1], return_inverse=True)
    return BipartiteGraph(len(x_ids), len(y_ids), np.stack([xs, ys], axis=1), x_ids, y_ids)


def save_graph(g: BipartiteGraph, path) -> None:
    header = GRAPH_MAGIC + struct.pack("<HQQQ", GRAPH_VERSION, g.n1, g.n2, g.n_edges)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(g.edges.astype("<u4").tobytes())


def load_graph(path) -> BipartiteGraph:
    data = Path(path).read_bytes()
    if data[:4] != GRAPH_MAGIC:
        raise GraphError(f"{path}: not a graph cache (bad magic)")
    version, n1, n2, m = struct.unpack_from("<HQQQ", data, 4)
    if version != GRAPH_VERSION:
        raise GraphError(f"{path}: unsupported graph cache version {version}")
    offset = 4 + struct.calcsize("<HQQQ")
    edges = np.frombuffer(data, dtype="<u4", count=2 * m, offset=offset).reshape(m, 2)
    return BipartiteGraph(int(n1), int(n2), edges.astype(np.int64))


def split(g: BipartiteGraph, test_ratio: float, seed: int) -> DataSplit:
    """Per-x stratified holdout that leaves every x at least one train edge.

    Each x gets ``floor(ratio * deg)`` test edges (capped at ``deg - 1``);
    leftover quota up to ``round(ratio * |E|)`` goes to the largest
    fractional remainders, ties in random order.
    """
    if not 0.0 < test_ratio < 1.0:
        raise GraphError("test_ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    nbrs = g.neighbors()
    deg = np.array([len(n) for n in nbrs], dtype=np.int64)
    cap = np.maximum(deg - 1, 0)
    want = test_ratio * deg
    quota = np.minimum(np.floor(want).astype(np.int64), cap)
    target = min(int(round(test_ratio * g.n_edges)), int(cap.sum()))
    remaining = target - int(quota.sum())
    if remaining > 0:
        frac = want - quota
        tiebreak = rng.random(g.n1)
        order = np.lexsort((tiebreak, -frac))
        for x in order:
            if remaining == 0:
                break
            if quota[x] < cap[x]:
                quota[x] += 1
                remaining -= 1
    n_single = int((deg == 1).sum())
    if n_single:
        log.info("split: %d x-node(s) of degree 1 keep their only edge in train", n_single)

    test_rows = []
    train_rows = []
    for x in range(g.n1):
        ys = nbrs[x]
        if len(ys) == 0:
            continue
        perm = rng.permutation(len(ys))
        k = quota[x]
        test_rows.extend((x, y) for y in ys[perm[:k]])
        train_rows.extend((x, y) for y in ys[perm[k:]])
    train = g.with_edges(np.asarray(train_rows, dtype=np.int64).reshape(-1, 2))
    test = g.with_edges(np.asarray(test_rows, dtype=np.int64).reshape(-1, 2))
    return DataSplit(train, test, test_ratio, seed)


def planted_clusters(n1: int = 20, n2: int = 20, n_clusters: int = 2, p_in: float = 0.8,
                     p_out: float = 0.05, seed: int = 0) -> BipartiteGraph:
    """Stochastic block bipartite graph with aligned x/y clusters.

    x-nodes with no sampled edge are given one in-cluster edge so the graph
    has no isolated first-side nodes.
    """
    rng = np.random.default_rng(seed)
    cx = np.arange(n1) * n_clusters // n1
    cy = np.arange(n2) * n_clusters // n2
    same = cx[:, None] == cy[None, :]
    prob = np.where(same, p_in, p_out)
    Y = rng.random((n1, n2)) < prob
    for x in np.flatnonzero(~Y.any(axis=1)):
        Y[x, rng.choice(np.flatnonzero(same[x]))] = True
    xs, ys = np.nonzero(Y)
    return BipartiteGraph(n1, n2, np.stack([xs, ys], axis=1))
