import logging

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from lirdrec.errors import FormatError, PreconditionError
from lirdrec.graphs import (build_item_graph, build_knn_modality_graph, build_norm_adjacency,
                            fuse_and_normalize, load_graph, load_norm_adjacency, propagate,
                            store_graph, store_norm_adjacency)


def dense_norm_oracle(num_users, num_items, users, items):
    r = np.zeros((num_users, num_items))
    r[users, items] = 1.0
    du, di = r.sum(1), r.sum(0)
    out = np.zeros_like(r)
    for u in range(num_users):
        for i in range(num_items):
            if r[u, i]:
                out[u, i] = 1.0 / np.sqrt(du[u] * di[i])
    return out


def random_edges(rng, nu, ni, density=0.4):
    mask = rng.random((nu, ni)) < density
    mask[np.arange(nu), rng.integers(0, ni, nu)] = True
    return np.nonzero(mask)


def test_single_edge_weight_one():
    adj = build_norm_adjacency(1, 1, [0], [0], np.float64)
    assert adj.user_item.toarray().tolist() == [[1.0]]


def test_hand_weights():
    adj = build_norm_adjacency(2, 2, [0, 0, 1], [0, 1, 0], np.float64)
    r = adj.user_item.toarray()
    assert r[0, 0] == pytest.approx(0.5)
    assert r[0, 1] == pytest.approx(1 / np.sqrt(2))
    assert r[1, 0] == pytest.approx(1 / np.sqrt(2))


def test_matches_dense_oracle_and_two_hop_walk():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        u, i = random_edges(rng, 6, 5)
        adj = build_norm_adjacency(6, 5, u, i, np.float64)
        oracle = dense_norm_oracle(6, 5, u, i)
        np.testing.assert_allclose(adj.user_item.toarray(), oracle, atol=1e-15)
        a_dense = np.block([[np.zeros((6, 6)), oracle], [oracle.T, np.zeros((5, 5))]])
        onehot = np.zeros((11, 1))
        onehot[seed % 11] = 1.0
        two_hop = propagate(adj.full(), propagate(adj.full(), onehot).value).value
        np.testing.assert_allclose(two_hop, a_dense @ a_dense @ onehot, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_adjacency_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    u, i = random_edges(rng, 7, 6)
    a = build_norm_adjacency(7, 6, u, i, np.float64).full()
    x, y = rng.standard_normal(13), rng.standard_normal(13)
    assert abs(x @ (a @ y) - (a @ x) @ y) < 1e-10
    assert (a.data > 0).all()


def test_isolated_nodes_warn(caplog):
    with caplog.at_level(logging.WARNING, logger="lirdrec.graphs"):
        adj = build_norm_adjacency(3, 3, [0], [0], np.float64)
    assert "isolated" in caplog.text
    assert adj.user_item[1].nnz == 0


def test_empty_train_rejected():
    with pytest.raises(PreconditionError):
        build_norm_adjacency(2, 2, [], [])


def test_knn_identical_rows_link_lowest_other_index():
    g = build_knn_modality_graph(np.ones((3, 2)), k=1).toarray()
    # directed picks: 0->1, 1->0, 2->0; symmetrized by max
    expected = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=float)
    np.testing.assert_array_equal(g, expected)


def test_knn_basis_rows():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    g = build_knn_modality_graph(x, k=1).toarray()
    expected = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=float)
    np.testing.assert_array_equal(g, expected)


def test_knn_zero_row_has_zero_cosine():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    g = build_knn_modality_graph(x, k=1).toarray()
    # item 2's best is cos 0 (items 0 and 3) -> lowest index 0
    assert g[2, 0] == 1.0


def brute_force_knn(x, k):
    n = len(x)
    norms = [np.sqrt(sum(v * v for v in row)) for row in x.tolist()]
    edges = set()
    for i in range(n):
        sims = []
        for j in range(n):
            if i == j:
                continue
            if norms[i] == 0 or norms[j] == 0:
                c = 0.0
            else:
                c = sum(a * b for a, b in zip(x[i], x[j])) / (norms[i] * norms[j])
            sims.append((-c, j))
        for _, j in sorted(sims)[:k]:
            edges.add((i, j))
            edges.add((j, i))
    return edges


@pytest.mark.parametrize("seed", range(10))
def test_knn_matches_brute_force(seed):
    x = np.random.default_rng(seed).standard_normal((20, 5))
    for k in (1, 3, 10):
        g = build_knn_modality_graph(x, k, block_size=7).tocoo()
        assert set(zip(g.row.tolist(), g.col.tolist())) == brute_force_knn(x, k)


def test_knn_rows_hold_at_least_k_and_exclude_self():
    x = np.random.default_rng(0).standard_normal((30, 4))
    g = build_knn_modality_graph(x, k=4)
    assert (np.diff(g.indptr) >= 4).all()
    assert g.diagonal().sum() == 0


def test_knn_k_bounds():
    with pytest.raises(PreconditionError):
        build_knn_modality_graph(np.ones((3, 2)), k=3)


def test_fuse_single_modality_is_plain_normalization():
    g = build_knn_modality_graph(np.random.default_rng(1).standard_normal((8, 3)), 2)
    s = fuse_and_normalize([g], [1.0], np.float64).toarray()
    d = g.toarray().sum(1)
    np.testing.assert_allclose(s, g.toarray() / np.sqrt(np.outer(d, d)), atol=1e-15)


def test_two_node_graph_weight_one():
    g = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert fuse_and_normalize([g], [1.0], np.float64).toarray().tolist() == [[0, 1], [1, 0]]


def test_fusion_matches_dense_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        ga = build_knn_modality_graph(rng.standard_normal((8, 4)), 3)
        gb = build_knn_modality_graph(rng.standard_normal((8, 2)), 3)
        fused = 0.1 * ga.toarray() + 0.9 * gb.toarray()
        d = fused.sum(1)
        oracle = fused / np.sqrt(np.outer(d, d))
        s = fuse_and_normalize({"visual": ga, "textual": gb}, {"visual": 0.1, "textual": 0.9}, np.float64)
        assert np.abs(s.toarray() - oracle).max() < 1e-12


def test_fusion_weights_must_sum_to_one():
    g = sp.identity(3, format="csr")
    with pytest.raises(PreconditionError):
        fuse_and_normalize([g, g], [0.5, 0.4])


def test_item_graph_rebuild_bit_identical():
    rng = np.random.default_rng(5)
    feats = {"visual": rng.standard_normal((40, 6)), "textual": rng.standard_normal((40, 3))}
    a, b = build_item_graph(feats, 5), build_item_graph(feats, 5)
    assert (a != b).nnz == 0
    assert np.array_equal(a.data, b.data) and np.array_equal(a.indices, b.indices)


def test_graph_cache_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    g = build_item_graph({"visual": rng.standard_normal((12, 3)), "textual": rng.standard_normal((12, 2))}, 3)
    path = str(tmp_path / "g.grx")
    store_graph(path, g)
    back = load_graph(path, "item_graph")
    assert (back != g).nnz == 0
    with pytest.raises(FormatError):
        load_graph(path, "norm_adjacency")
    adj = build_norm_adjacency(4, 3, [0, 1, 2, 3], [0, 1, 2, 0])
    store_norm_adjacency(str(tmp_path / "a.grx"), adj)
    back = load_norm_adjacency(str(tmp_path / "a.grx"))
    assert (back.user_item != adj.user_item).nnz == 0
    assert (back.item_user != adj.item_user).nnz == 0
