import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lirdrec.dataio import Dataset, Split
from lirdrec.evaluation import evaluate, evaluate_scores, ndcg_at_k, recall_at_k

from oracles import brute_ndcg, brute_recall, rank_items


def test_perfect_ranking():
    assert recall_at_k([3, 1, 0, 2], {3, 1}, 2) == 1.0
    assert ndcg_at_k([3, 1, 0, 2], {3, 1}, 2) == 1.0


def test_single_relevant_second():
    assert recall_at_k([1, 0], {0}, 2) == 1.0
    assert ndcg_at_k([1, 0], {0}, 2) == pytest.approx(0.630930, abs=1e-6)


def test_relevant_outside_top_k():
    assert recall_at_k([1, 2, 0], {0}, 2) == 0.0
    assert ndcg_at_k([1, 2, 0], {0}, 2) == 0.0


def test_empty_relevant_set():
    with pytest.raises(ValueError):
        recall_at_k([0, 1], set(), 1)


def _instance(rng):
    n_items = int(rng.integers(1, 13))
    n_users = int(rng.integers(1, 6))
    users, items, splits = [], [], []
    for u in range(n_users):
        for i in range(n_items):
            r = rng.random()
            if r < 0.25:
                users.append(u), items.append(i), splits.append(int(rng.integers(0, 3)))
    ds = Dataset(n_users, n_items, users, items, splits)
    # coarse scores force many ties
    scores = rng.integers(0, 4, size=(n_users, n_items)).astype(float)
    return ds, scores


def _brute_report(ds, scores, split, ks):
    masked = {Split.VALID: (Split.TRAIN,), Split.TEST: (Split.TRAIN, Split.VALID)}[split]
    rec = {k: [] for k in ks}
    nd = {k: [] for k in ks}
    for u in range(ds.num_users):
        sel = ds.users == u
        truth = {int(i) for i, s in zip(ds.items[sel], ds.splits[sel]) if s == split}
        if not truth:
            continue
        excluded = {int(i) for i, s in zip(ds.items[sel], ds.splits[sel]) if s in masked}
        ranked = rank_items(scores[u].tolist(), excluded)
        for k in ks:
            rec[k].append(brute_recall(ranked, truth, k))
            nd[k].append(brute_ndcg(ranked, truth, k))
    return rec, nd


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(300):
        ds, scores = _instance(rng)
        for split in (Split.VALID, Split.TEST):
            ks = (1, 3, 10)
            rep = evaluate_scores(lambda b: scores[b], ds, split, ks, keep_per_user=True)
            rec, nd = _brute_report(ds, scores, split, ks)
            for k in ks:
                users, r, n = rep.per_user[k]
                assert r.tolist() == rec[k] and n.tolist() == nd[k]
            checked += 1
    assert checked == 600


def test_single_list_metrics_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(1, 13))
        ranked = rng.permutation(n).tolist()
        relevant = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, 15))
        assert recall_at_k(ranked, relevant, k) == brute_recall(ranked, relevant, k)
        assert ndcg_at_k(ranked, relevant, k) == brute_ndcg(ranked, relevant, k)


def _world(rng, n_users=30, n_items=50):
    users, items, splits = [], [], []
    for u in range(n_users):
        chosen = rng.choice(n_items, size=10, replace=False)
        for pos, i in enumerate(chosen):
            users.append(u), items.append(i), splits.append(0 if pos < 8 else (1 if pos == 8 else 2))
    return Dataset(n_users, n_items, users, items, splits)


def test_random_scorer_meets_analytic_expectation():
    # with 2 masked-free test positions per user among 41 unmasked items: E[recall@K] = K / 41
    rng = np.random.default_rng(2)
    ds = _world(rng)
    means = []
    for seed in range(50):
        r = np.random.default_rng(seed)
        rep = evaluate_scores(lambda b: r.random((len(b), ds.num_items)), ds, Split.TEST, (10,))
        means.append(rep.recall[10])
    expected = 10 / 41
    se = np.sqrt(expected * (1 - expected) / (30 * 50))
    assert abs(np.mean(means) - expected) < 4 * se


def test_skipped_users_are_counted():
    ds = Dataset(3, 4, [0, 0, 1, 2], [0, 1, 2, 3], [0, 2, 0, 0])
    rep = evaluate_scores(lambda b: np.zeros((len(b), 4)), ds, Split.TEST)
    assert rep.num_users == 1 and rep.skipped_users == 2


def test_full_list_recall_is_one():
    ds = _world(np.random.default_rng(3))
    rep = evaluate_scores(lambda b: np.random.default_rng(0).random((len(b), ds.num_items)),
                          ds, Split.TEST, (ds.num_items,))
    assert rep.recall[ds.num_items] == 1.0


def test_masked_items_never_hit():
    # the only valid item is also scored highest but test masks train+valid
    ds = Dataset(1, 3, [0, 0, 0], [0, 1, 2], [1, 2, 0])
    scores = np.array([[10.0, 0.0, 20.0]])
    rep = evaluate_scores(lambda b: scores[b], ds, Split.TEST, (1,))
    assert rep.recall[1] == 1.0


class _Reps:
    def __init__(self, u, i):
        self.u, self.i = u, i

    def full_representations(self):
        return self.u, self.i


def test_two_evaluations_identical():
    rng = np.random.default_rng(4)
    ds = _world(rng)
    model = _Reps(rng.standard_normal((30, 4)), rng.standard_normal((50, 4)))
    a, b = evaluate(model, ds, Split.TEST), evaluate(model, ds, Split.TEST)
    assert a.recall == b.recall and a.ndcg == b.ndcg
    rows = a.rows(3, 1.5)
    assert rows[0] == (3, "test", "recall", 10, a.recall[10], 1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_only_dependence(seed):
    rng = np.random.default_rng(seed)
    ds = _world(rng, 8, 20)
    scores = rng.integers(0, 5, size=(8, 20)).astype(float)
    base = evaluate_scores(lambda b: scores[b], ds, Split.TEST, (5, 10))
    moved = evaluate_scores(lambda b: np.exp(scores[b]) * 3.0 - 7.0, ds, Split.TEST, (5, 10))
    assert base.recall == moved.recall and base.ndcg == moved.ndcg


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_monotone_and_dcg_prefix(seed):
    rng = np.random.default_rng(seed)
    ds = _world(rng, 8, 30)
    scores = rng.random((8, 30))
    rep = evaluate_scores(lambda b: scores[b], ds, Split.VALID, (5, 10, 20), keep_per_user=True)
    assert rep.recall[5] <= rep.recall[10] <= rep.recall[20]
    for u in range(8):
        sel = ds.users == u
        truth = {int(i) for i, s in zip(ds.items[sel], ds.splits[sel]) if s == Split.VALID}
        excluded = {int(i) for i, s in zip(ds.items[sel], ds.splits[sel]) if s == Split.TRAIN}
        ranked = rank_items(scores[u].tolist(), excluded)
        dcg10_at_20 = brute_ndcg(ranked[:10], truth, 20)
        assert ndcg_at_k(ranked, truth, 20) >= dcg10_at_20
