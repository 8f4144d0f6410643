import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bgch.graph import (BipartiteGraph, EdgeListParseError, EmptyGraphError, GraphError,
                        load_edge_list, load_graph, normalize, planted_clusters, save_graph, split)

from conftest import random_graph


def _write(tmp_path, text, name="e.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_counts(tmp_path):
    g = load_edge_list(_write(tmp_path, "0 0\n0 1\n1 1\n"))
    assert (g.n1, g.n2, g.n_edges) == (2, 2, 3)


def test_duplicate_lines_collapse(tmp_path):
    g = load_edge_list(_write(tmp_path, "0 0\n0 0\n"))
    assert g.n_edges == 1


def test_separators_comments_and_extra_columns(tmp_path):
    text = "# user item rating\n10\t7\t5\n10,9,3\n\n30 7 1 999\n"
    g = load_edge_list(_write(tmp_path, text))
    assert (g.n1, g.n2, g.n_edges) == (2, 2, 3)
    assert g.x_ids.tolist() == [10, 30] and g.y_ids.tolist() == [7, 9]
    assert g.edges.tolist() == [[0, 0], [0, 1], [1, 0]]


def test_malformed_line_reports_line_number(tmp_path):
    p = _write(tmp_path, "0 0\n1 x\n")
    with pytest.raises(EdgeListParseError) as exc:
        load_edge_list(p)
    assert exc.value.lineno == 2
    assert ":2:" in str(exc.value) or "line 2" in str(exc.value)


@pytest.mark.parametrize("text", ["", "# only a comment\n\n"])
def test_empty_file(tmp_path, text):
    with pytest.raises(EmptyGraphError):
        load_edge_list(_write(tmp_path, text))


def test_negative_id_rejected(tmp_path):
    with pytest.raises(EdgeListParseError):
        load_edge_list(_write(tmp_path, "0 -1\n"))


def test_out_of_range_edge_rejected():
    with pytest.raises(GraphError):
        BipartiteGraph(2, 2, np.array([[0, 2]]))


def test_density_is_edges_over_cells():
    g = BipartiteGraph(2, 5, np.array([[0, 0], [1, 4], [1, 3]]))
    assert g.density == pytest.approx(3 / 10)


def test_normalize_star():
    # u-a, u-b with u on the x side
    M = normalize(BipartiteGraph(1, 2, np.array([[0, 0], [0, 1]]))).toarray()
    assert M[0, 1] == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert M[0, 2] == pytest.approx(0.70711, abs=1e-5)
    assert np.array_equal(M, M.T)


def test_normalize_single_edge_is_exactly_one():
    M = normalize(BipartiteGraph(1, 1, np.array([[0, 0]]))).toarray()
    assert M[0, 1] == 1.0 and M[1, 0] == 1.0


def test_normalize_complete_2x2():
    g = BipartiteGraph(2, 2, np.array([[0, 0], [0, 1], [1, 0], [1, 1]]))
    M = normalize(g).toarray()
    assert np.all(M[:2, 2:] == 0.5) and np.all(M[:2, :2] == 0) and np.all(M[2:, 2:] == 0)


def test_normalize_flags_isolated():
    adj = normalize(BipartiteGraph(3, 2, np.array([[0, 0]])))
    assert adj.n_isolated == 3
    assert adj.matrix[1].nnz == 0


def test_normalize_empty_raises():
    with pytest.raises(EmptyGraphError):
        normalize(BipartiteGraph(2, 2, np.zeros((0, 2))))


def _dense_norm(g):
    n = g.n_nodes
    A = np.zeros((n, n))
    for x, y in g.edges:
        A[x, g.n1 + y] = A[g.n1 + y, x] = 1.0
    deg = A.sum(1)
    out = np.zeros_like(A)
    for r, c in zip(*np.nonzero(A)):
        out[r, c] = (deg[r] * deg[c]) ** -0.5
    return out, A, deg


@given(st.integers(1, 25), st.integers(1, 25), st.integers(1, 120), st.integers(0, 2**32 - 1))
def test_normalize_matches_dense_oracle(n1, n2, m, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n1, n2, m)
    adj = normalize(g)
    oracle, A, deg = _dense_norm(g)
    M = adj.toarray()
    assert np.max(np.abs(M - oracle)) <= 1e-15
    assert np.array_equal(M, M.T)
    # block anti-diagonal, row r has deg(r) nonzeros
    assert not M[:n1, :n1].any() and not M[n1:, n1:].any()
    assert np.array_equal(np.diff(adj.matrix.indptr), deg.astype(int))
    # ones vector: sum over neighbors of 1/sqrt(deg(r) deg(z))
    ones = adj @ np.ones(g.n_nodes)
    brute = np.array([sum(1 / math.sqrt(deg[r] * deg[z]) for z in np.flatnonzero(A[r]))
                      for r in range(g.n_nodes)])
    assert np.allclose(ones, brute, rtol=1e-13, atol=0)
    X = rng.standard_normal((g.n_nodes, 5))
    assert np.max(np.abs(adj @ X - oracle @ X)) < 1e-10


def test_split_ten_edges():
    g = BipartiteGraph(2, 5, np.array([[x, y] for x in range(2) for y in range(5)]))
    s = split(g, 0.2, 7)
    assert (s.train.n_edges, s.test.n_edges) == (8, 2)
    s2 = split(g, 0.2, 7)
    assert np.array_equal(s.train.edges, s2.train.edges)
    assert np.array_equal(s.test.edges, s2.test.edges)


def test_split_degree_one_stays_in_train():
    g = BipartiteGraph(2, 4, np.array([[0, 0], [1, 0], [1, 1], [1, 2], [1, 3]]))
    s = split(g, 0.5, 0)
    assert [0, 0] in s.train.edges.tolist()
    assert 0 not in s.test.edges[:, 0]


@given(st.integers(1, 15), st.integers(1, 15), st.integers(1, 100), st.floats(0.05, 0.95),
       st.integers(0, 1000))
def test_split_partition_invariants(n1, n2, m, ratio, seed):
    g = random_graph(np.random.default_rng(seed), n1, n2, m)
    s = split(g, ratio, seed)
    tr = set(map(tuple, s.train.edges.tolist()))
    te = set(map(tuple, s.test.edges.tolist()))
    assert tr.isdisjoint(te)
    assert tr | te == set(map(tuple, g.edges.tolist()))
    train_x = set(s.train.edges[:, 0].tolist())
    assert set(s.test_positives) <= train_x


def test_split_bad_ratio():
    g = planted_clusters(4, 4, seed=0)
    with pytest.raises(GraphError):
        split(g, 1.0, 0)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 60), st.integers(0, 99))
def test_graph_cache_round_trip(tmp_path_factory, n1, n2, m, seed):
    g = random_graph(np.random.default_rng(seed), n1, n2, m)
    p = tmp_path_factory.mktemp("g") / "g.bgrf"
    save_graph(g, p)
    h = load_graph(p)
    assert (h.n1, h.n2) == (g.n1, g.n2)
    assert np.array_equal(h.edges, g.edges)


def test_graph_cache_header_layout(tmp_path):
    g = BipartiteGraph(3, 4, np.array([[2, 3], [0, 1]]))
    p = tmp_path / "g.bgrf"
    save_graph(g, p)
    raw = p.read_bytes()
    assert raw[:4] == b"BGRF"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert [int.from_bytes(raw[6 + 8 * i:14 + 8 * i], "little") for i in range(3)] == [3, 4, 2]
    assert np.frombuffer(raw[30:], "<u4").tolist() == [0, 1, 2, 3]


def test_graph_cache_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE" + bytes(30))
    with pytest.raises(GraphError):
        load_graph(p)


def test_planted_clusters_structure():
    g = planted_clusters(20, 20, p_in=0.8, p_out=0.05, seed=3)
    assert g.n1 == 20 and g.n2 == 20
    assert len(g.isolated()) <= 20  # only y-nodes may be isolated
    same = (g.edges[:, 0] < 10) == (g.edges[:, 1] < 10)
    assert same.mean() > 0.8
