"""Hamming-space Top-N search over packed code tables.

A layer's score is ``a_x * a_y * (d - 2 * hamming)``: an XOR + popcount
replaces the float inner product of the dequantized codes. Scores are
accumulated layer by layer in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit, uint64

from .hashing import HashCodeTable, n_words, pack_codes, unpack_codes

if hasattr(np, "bitwise_count"):
    _popcount = np.bitwise_count
else:  # numpy < 2.0
    _POP8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _popcount(words):
        b = np.ascontiguousarray(words).view(np.uint8)
        return _POP8[b].reshape(words.shape + (8,)).sum(axis=-1, dtype=np.uint8)


class RetrievalError(ValueError):
    pass


@njit(cache=True, inline="always")
def _popcount64(x):
    x = x - ((x >> uint64(1)) & uint64(0x5555555555555555))
    x = (x & uint64(0x3333333333333333)) + ((x >> uint64(2)) & uint64(0x3333333333333333))
    x = (x + (x >> uint64(4))) & uint64(0x0F0F0F0F0F0F0F0F)
    return (x * uint64(0x0101010101010101)) >> uint64(56)


@njit(cache=True)
def _hamming_scan(banks, scales, qcodes, qscales, d, out):
    # banks (S, n, W) uint64, scales (S, n) float64; layer terms added in order s = 0..S-1
    S, n, W = banks.shape
    for i in range(n):
        out[i] = 0.0
    for s in range(S):
        qa = qscales[s]
        for i in range(n):
            h = 0
            for w in range(W):
                h += _popcount64(banks[s, i, w] ^ qcodes[s, w])
            out[i] += (qa * scales[s, i]) * (d - 2 * h)


def hamming_distance(a, b, d: int) -> int:
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape or a.shape[-1] != n_words(d):
        raise RetrievalError(f"segment width mismatch: {a.shape} vs {b.shape} for d={d}")
    return int(_popcount(a ^ b).sum())


@dataclass(frozen=True)
class Query:
    codes: np.ndarray   # (S, W) uint64
    scales: np.ndarray  # (S,)


@dataclass
class TopNResult:
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)

    def pairs(self):
        return list(zip(self.ids.tolist(), self.scores.tolist()))


def _select_top(scores: np.ndarray, ids: np.ndarray, N: int) -> TopNResult:
    """Descending score, ascending id among ties."""
    if N >= len(scores):
        keep = np.arange(len(scores))
    else:
        kth = np.partition(scores, len(scores) - N)[len(scores) - N]
        keep = np.flatnonzero(scores >= kth)
    order = np.lexsort((ids[keep], -scores[keep]))[:N]
    sel = keep[order]
    return TopNResult(ids[sel], scores[sel])


def _drop_excluded(scores, ids, exclude):
    if exclude is None or len(exclude) == 0:
        return scores, ids
    keep = ~np.isin(ids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
    return scores[keep], ids[keep]


class RetrievalIndex:
    """Candidate codes laid out as one contiguous (n, W) bank per layer."""

    def __init__(self, table: HashCodeTable, candidates=None, ids=None):
        if candidates is None:
            candidates = np.arange(table.n_nodes)
        candidates = np.asarray(candidates, dtype=np.int64)
        self.d = table.d
        self.n_segments = table.n_segments
        self.banks = np.ascontiguousarray(table.codes[candidates].transpose(1, 0, 2))
        self.scales = np.ascontiguousarray(table.scales[candidates].T.astype(np.float64))
        self.ids = np.asarray(ids if ids is not None else candidates, dtype=np.int64)
        if len(self.ids) != len(candidates):
            raise RetrievalError("ids and candidates differ in length")
        self.banks.setflags(write=False)
        self.scales.setflags(write=False)

    @classmethod
    def for_second_side(cls, table: HashCodeTable, n1: int) -> "RetrievalIndex":
        """Index every y-node; result ids are y-side indices (global - n1)."""
        cand = np.arange(n1, table.n_nodes)
        return cls(table, cand, cand - n1)

    def __len__(self):
        return len(self.ids)

    def query_from_table(self, table: HashCodeTable, node: int) -> Query:
        if not 0 <= node < table.n_nodes:
            raise RetrievalError(f"unknown node {node}")
        return Query(table.codes[node], table.scales[node].astype(np.float64))

    def _check_query(self, q: Query):
        if q.codes.shape != (self.n_segments, self.banks.shape[2]):
            raise RetrievalError(f"query has shape {q.codes.shape}, index expects "
                                 f"{(self.n_segments, self.banks.shape[2])}")

    def score_all(self, q: Query) -> np.ndarray:
        self._check_query(q)
        qs = np.asarray(q.scales, dtype=np.float32).astype(np.float64)
        qc = np.array(q.codes, dtype=np.uint64, order="C")  # fresh writable copy: one kernel signature
        out = np.empty(len(self.ids), dtype=np.float64)
        _hamming_scan(self.banks, self.scales, qc, qs, self.d, out)
        return out

    def warm_up(self) -> None:
        """Load the compiled scan kernel so the first timed query is not paying for it."""
        if len(self.ids):
            self.score_all(Query(self.banks[:, 0].copy(), np.ones(self.n_segments)))

    def score(self, q: Query, candidate: int) -> float:
        self._check_query(q)
        qs = np.asarray(q.scales, dtype=np.float32).astype(np.float64)
        total = 0.0
        for s in range(self.n_segments):
            h = hamming_distance(self.banks[s, candidate], q.codes[s], self.d)
            total += (qs[s] * self.scales[s, candidate]) * (self.d - 2 * h)
        return float(total)

    def topn(self, q: Query, N: int, exclude=None) -> TopNResult:
        if N < 1:
            raise RetrievalError("N must be >= 1")
        return _select_top(*_drop_excluded(self.score_all(q), self.ids, exclude), N)


class FloatIndex:
    """Dequantized float64 view of the same candidates; the slow reference path.

    Each layer is a dense (n, d) bank of ``a_y * Q_y``. A query is scored as
    ``sum_l a_x * (bank_l @ Q_x)``. The dot products are sums of +-a_y and so
    exact in float64, which makes the scores bit-identical to the Hamming path.
    """

    def __init__(self, index: RetrievalIndex):
        self.d = index.d
        self.ids = index.ids
        self.n_segments = index.n_segments
        signs = unpack_codes(index.banks, index.d).astype(np.float64)  # (S, n, d)
        self.banks = np.ascontiguousarray(signs * index.scales[:, :, None])

    def score_all(self, q: Query) -> np.ndarray:
        qs = np.asarray(q.scales, dtype=np.float32).astype(np.float64)
        qsign = unpack_codes(q.codes, self.d).astype(np.float64)
        out = np.zeros(len(self.ids), dtype=np.float64)
        for s in range(self.n_segments):
            out += qs[s] * (self.banks[s] @ qsign[s])
        return out

    def topn(self, q: Query, N: int, exclude=None) -> TopNResult:
        if N < 1:
            raise RetrievalError("N must be >= 1")
        return _select_top(*_drop_excluded(self.score_all(q), self.ids, exclude), N)


def dequantized_inner(table_x: HashCodeTable, x: int, table_y: HashCodeTable, y: int) -> float:
    """Plain float inner product of two dequantized codes, summed over layers."""
    total = 0.0
    for s in range(table_x.n_segments):
        total += float(table_x.dequantize(x, s) @ table_y.dequantize(y, s))
    return total


@dataclass
class BenchReport:
    mode: str
    n_candidates: int
    n_queries: int
    mean_us: float
    p99_us: float

    def as_dict(self):
        return dict(self.__dict__)


def _time_queries(fn, queries) -> np.ndarray:
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        t0 = time.perf_counter()
        fn(q)
        out[i] = time.perf_counter() - t0
    return out * 1e6


def bench_matching(index: RetrievalIndex, queries: list[Query], modes=("hamming", "float"),
                   float_index: FloatIndex | None = None, check: int | None = None,
                   N: int = 20) -> dict:
    """Time single-threaded full-scan scoring per query.

    Before timing, both paths must produce identical scores and rankings
    on the first ``check`` queries (all by default).
    """
    from threadpoolctl import threadpool_limits

    if float_index is None and "float" in modes:
        float_index = FloatIndex(index)
    with threadpool_limits(limits=1):
        if float_index is not None:
            for q in queries[: check if check is not None else len(queries)]:
                a = index.score_all(q)
                b = float_index.score_all(q)
                if not np.array_equal(a, b):
                    bad = int(np.flatnonzero(a != b)[0])
                    raise RetrievalError(f"hamming and float scores differ at candidate {bad}: "
                                         f"{a[bad]!r} vs {b[bad]!r}")
                ra, rb = index.topn(q, N), float_index.topn(q, N)
                if not np.array_equal(ra.ids, rb.ids):
                    raise RetrievalError("hamming and float rankings differ")
        reports = {}
        for mode in modes:
            fn = index.score_all if mode == "hamming" else float_index.score_all
            t = _time_queries(fn, queries)
            reports[mode] = BenchReport(mode, len(index), len(queries), float(t.mean()),
                                        float(np.percentile(t, 99)))
    out = {"reports": reports}
    if "hamming" in reports and "float" in reports:
        out["speedup"] = reports["float"].mean_us / reports["hamming"].mean_us
    return out


def random_table(n: int, d: int, L: int, rng: np.random.Generator, scale_low: float = 0.01,
                 scale_high: float = 1.0) -> HashCodeTable:
    signs = rng.integers(0, 2, size=(n, L + 1, d)) * 2 - 1
    scales = rng.uniform(scale_low, scale_high, size=(n, L + 1)).astype(np.float32)
    return HashCodeTable(pack_codes(signs), scales, d)


@dataclass
class IdentityViolation:
    d: int
    L: int
    trial: int
    layer: int
    hamming_term: float
    float_term: float
    ulps: float


def score_identity_fuzz(trials: int, seed: int = 0, dims=(8, 64, 256), layer_counts=(0, 1, 2),
                        max_ulps: float = 1.0, chunk: int = 4096) -> tuple[int, list]:
    """Check ``a_x a_y (d - 2 hamming) == <a_x Q_x, a_y Q_y>`` on random codes.

    Trials are split evenly over the (d, L) grid. The Hamming side goes
    through packing and popcount; the float side is a float64 dot product of
    the dequantized sign vectors. Returns (trials run, violations).
    """
    rng = np.random.default_rng(seed)
    grid = [(d, L) for d in dims for L in layer_counts]
    per = -(-trials // len(grid))
    bad: list[IdentityViolation] = []
    done = 0
    for d, L in grid:
        S = L + 1
        left = per
        while left > 0:
            m = min(chunk, left)
            qx = (rng.integers(0, 2, size=(m, S, d), dtype=np.int8) * 2 - 1)
            qy = (rng.integers(0, 2, size=(m, S, d), dtype=np.int8) * 2 - 1)
            ax = rng.uniform(0.0, 2.0, size=(m, S)).astype(np.float32).astype(np.float64)
            ay = rng.uniform(0.0, 2.0, size=(m, S)).astype(np.float32).astype(np.float64)
            h = _popcount(pack_codes(qx) ^ pack_codes(qy)).sum(axis=-1, dtype=np.int64)
            ham = (ax * ay) * (d - 2 * h)
            flt = np.einsum("msd,msd->ms", ax[..., None] * qx, ay[..., None] * qy)
            ulps = np.abs(ham - flt) / np.spacing(np.maximum(np.abs(ham), np.abs(flt)))
            for t, s in zip(*np.nonzero(ulps > max_ulps)):
                bad.append(IdentityViolation(d, L, done + int(t), int(s), float(ham[t, s]),
                                             float(flt[t, s]), float(ulps[t, s])))
            done += m
            left -= m
    return done, bad

