import numpy as np
import pytest
from hypothesis import given, strategies as st

from bgch.hashing import HashCodeTable, pack_codes
from bgch.retrieval import (FloatIndex, Query, RetrievalError, RetrievalIndex, bench_matching,
                            dequantized_inner, hamming_distance, random_table, score_identity_fuzz)


def _table(signs, scales):
    signs = np.asarray(signs)
    return HashCodeTable(pack_codes(signs), np.asarray(scales, np.float32), signs.shape[-1])


def test_hamming_examples():
    a = pack_codes(np.array([1, 1, -1, 1]))
    b = pack_codes(np.array([1, -1, -1, -1]))
    assert hamming_distance(a, a, 4) == 0
    assert hamming_distance(a, b, 4) == 2
    x = pack_codes(np.random.default_rng(0).choice([-1, 1], 64))
    assert hamming_distance(x, ~x, 64) == 64


def test_hamming_width_mismatch():
    with pytest.raises(RetrievalError):
        hamming_distance(np.zeros(1, np.uint64), np.zeros(2, np.uint64), 64)
    with pytest.raises(RetrievalError):
        hamming_distance(np.zeros(2, np.uint64), np.zeros(2, np.uint64), 64)


def test_score_examples():
    t = _table([[[1, 1, -1, 1]], [[1, -1, -1, -1]]], [[1.0], [1.0]])
    idx = RetrievalIndex(t)
    assert idx.score(idx.query_from_table(t, 0), 1) == 0.0
    assert float(np.dot([1, 1, -1, 1], [1, -1, -1, -1])) == 0.0

    code = [[1, -1, 1, 1, -1, -1, 1, 1]]
    t = _table([code, code], [[2.0], [3.0]])
    idx = RetrievalIndex(t)
    assert idx.score(idx.query_from_table(t, 0), 1) == 48.0
    assert idx.score_all(idx.query_from_table(t, 0))[1] == 48.0

    t = _table([[[1, -1], [1, 1]], [[1, -1], [1, 1]]], [[0.0, 1.5], [4.0, 2.0]])
    idx = RetrievalIndex(t)
    assert idx.score(idx.query_from_table(t, 0), 1) == 1.5 * 2.0 * 2


def test_topn_singleton_and_exclusion():
    t = _table([[[1, -1, 1]], [[1, -1, 1]]], [[0.5], [2.0]])
    idx = RetrievalIndex(t, candidates=[1])
    q = idx.query_from_table(t, 0)
    res = idx.topn(q, 1)
    assert res.ids.tolist() == [1] and res.scores.tolist() == [0.5 * 2.0 * 3]
    assert len(idx.topn(q, 5, exclude=[1])) == 0


def test_topn_n_larger_than_candidates_returns_all(rng):
    t = random_table(12, 16, 1, rng)
    idx = RetrievalIndex(t)
    res = idx.topn(idx.query_from_table(t, 0), 100)
    assert sorted(res.ids.tolist()) == list(range(12))


def test_topn_rejects_bad_n(rng):
    t = random_table(3, 8, 0, rng)
    idx = RetrievalIndex(t)
    with pytest.raises(RetrievalError):
        idx.topn(idx.query_from_table(t, 0), 0)


def _oracle_rank(t, node, cands):
    scores = [(-dequantized_inner(t, node, t, c), c) for c in cands]
    return [c for _, c in sorted(scores)], {c: -s for s, c in scores}


@given(st.integers(1, 130), st.integers(0, 2), st.integers(0, 10_000))
def test_topn_matches_float_oracle(d, L, seed):
    rng = np.random.default_rng(seed)
    # few distinct scales so ties are common and the tie order is exercised
    t = random_table(201, d, L, rng)
    t = HashCodeTable(t.codes, np.round(t.scales * 4) / 4, d)
    cands = np.arange(1, 201)
    idx = RetrievalIndex(t, cands)
    res = idx.topn(idx.query_from_table(t, 0), 200)
    order, scores = _oracle_rank(t, 0, cands.tolist())
    assert res.ids.tolist() == order
    assert res.scores.tolist() == [scores[c] for c in order]
    fres = FloatIndex(idx).topn(idx.query_from_table(t, 0), 200)
    assert np.array_equal(fres.ids, res.ids) and np.array_equal(fres.scores, res.scores)


def test_topn_result_invariants(rng):
    t = random_table(300, 40, 2, rng)
    idx = RetrievalIndex(t)
    res = idx.topn(idx.query_from_table(t, 5), 50)
    assert np.all(np.diff(res.scores) <= 0)
    assert len(set(res.ids.tolist())) == 50


@given(st.integers(0, 10_000))
def test_topn_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    t = random_table(80, 24, 1, rng)
    t = HashCodeTable(t.codes, np.ones_like(t.scales), 24)  # many ties
    cands = np.arange(1, 80)
    perm = rng.permutation(cands)
    a = RetrievalIndex(t, cands).topn(Query(t.codes[0], t.scales[0]), 30)
    b = RetrievalIndex(t, perm).topn(Query(t.codes[0], t.scales[0]), 30)
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.scores, b.scores)


@given(st.integers(1, 200), st.integers(0, 10_000))
def test_flipping_a_disagreeing_bit_adds_two_alpha_products(d, seed):
    rng = np.random.default_rng(seed)
    qx = rng.choice([-1, 1], d)
    qy = rng.choice([-1, 1], d)
    qy[0] = -qx[0]
    ax, ay = np.float32(rng.uniform(0.1, 3)), np.float32(rng.uniform(0.1, 3))
    t = _table([[qx], [qy]], [[ax], [ay]])
    qy2 = qy.copy()
    qy2[0] = qx[0]
    t2 = _table([[qx], [qy2]], [[ax], [ay]])
    s1 = RetrievalIndex(t).score(Query(t.codes[0], t.scales[0]), 1)
    s2 = RetrievalIndex(t2).score(Query(t2.codes[0], t2.scales[0]), 1)
    assert s2 - s1 == pytest.approx(2 * float(ax) * float(ay), rel=1e-12)


@given(st.integers(1, 127), st.integers(0, 10_000))
def test_padding_bits_never_counted(d, seed):
    rng = np.random.default_rng(seed)
    words = pack_codes(rng.choice([-1, 1], (2, d)))
    assert np.all(words[:, -1] >> np.uint64(d % 64) == 0) if d % 64 else True
    h = hamming_distance(words[0], words[1], d)
    assert 0 <= h <= d


def test_score_identity_fuzz_small():
    n, bad = score_identity_fuzz(9000, seed=3)
    assert n >= 9000 and bad == []


def test_index_banks_reproduce_table(rng):
    t = random_table(40, 70, 2, rng)
    idx = RetrievalIndex(t)
    assert np.array_equal(idx.banks.transpose(1, 0, 2), t.codes)
    assert np.array_equal(idx.scales.T, t.scales.astype(np.float64))
    with pytest.raises(ValueError):
        idx.banks[0, 0, 0] = 0


def test_query_shape_checked(rng):
    t = random_table(4, 8, 1, rng)
    idx = RetrievalIndex(t)
    with pytest.raises(RetrievalError):
        idx.score_all(Query(np.zeros((3, 1), np.uint64), np.ones(3)))
    with pytest.raises(RetrievalError):
        idx.query_from_table(t, 99)


def test_bench_smoke_single_candidate(rng):
    t = random_table(2, 32, 1, rng)
    idx = RetrievalIndex(t, [0])
    rep = bench_matching(idx, [idx.query_from_table(t, 1)], N=1)
    assert set(rep["reports"]) == {"hamming", "float"}
    r = rep["reports"]["hamming"]
    assert r.n_candidates == 1 and r.n_queries == 1 and r.mean_us > 0 and r.p99_us >= 0
    assert rep["speedup"] > 0


def test_bench_asserts_agreement_on_many_queries(rng):
    t = random_table(1500, 64, 2, rng)
    idx = RetrievalIndex(t, np.arange(500))
    queries = [idx.query_from_table(t, 500 + i) for i in range(1000)]
    rep = bench_matching(idx, queries, N=10)
    assert rep["reports"]["float"].n_queries == 1000


def test_bench_detects_disagreement(rng):
    t = random_table(50, 16, 0, rng)
    idx = RetrievalIndex(t)
    fidx = FloatIndex(idx)
    fidx.banks = fidx.banks * 1.5
    with pytest.raises(RetrievalError):
        bench_matching(idx, [idx.query_from_table(t, 0)], float_index=fidx)
