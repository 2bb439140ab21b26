import numpy as np
import pytest
from scipy.special import expit

from lirdrec.baselines import LightGcnModel, MfModel, VbprModel, lightgcn_forward, mf_score, vbpr_score
from lirdrec.dataio import Split, split_random
from lirdrec.graphs import build_norm_adjacency
from lirdrec.synthetic import latent_factor_world
from lirdrec.tensor import Tape
from lirdrec.training import TrainConfig, build_model, compute_loss, fit, prepare

from helpers import grad_check

USERS = [0, 0, 1, 2, 2]
ITEMS = [0, 1, 1, 2, 3]
TRIPLES = (np.array([0, 1, 2, 0]), np.array([1, 1, 3, 0]), np.array([2, 0, 1, 3]))


def vbpr(seed=0, feat_dim=5, dim=3):
    rng = np.random.default_rng(seed)
    feats = {"visual": rng.standard_normal((4, feat_dim)), "textual": rng.standard_normal((4, 2))}
    return VbprModel(3, feats, dim, seed, np.float64)


def test_vbpr_zero_projection_leaves_id_part():
    m = vbpr()
    m.proj.value[:] = 0.0
    total, id_part, mm_part = m.score_parts([0, 1], [2, 3])
    np.testing.assert_array_equal(total, id_part)
    assert not mm_part.any()


def test_vbpr_one_dim_hand_case():
    m = VbprModel(1, np.array([[4.0]]), 1, 0, np.float64)
    m.user_id.value[:] = 2.0
    m.item_id.value[:] = 3.0
    m.user_pref.value[:] = 1.0
    m.proj.value[:] = 1.0
    assert vbpr_score(m, 0, 0) == (10.0, 6.0, 4.0)


def test_vbpr_breakdown_matches_full_scores():
    for seed in range(10):
        m = vbpr(seed)
        users, items = m.full_representations()
        rng = np.random.default_rng(seed)
        u, i = rng.integers(0, 3, 20), rng.integers(0, 4, 20)
        total, id_part, mm_part = m.score_parts(u, i)
        np.testing.assert_array_equal(total, id_part + mm_part)
        np.testing.assert_allclose(total, np.einsum("ij,ij->i", users[u], items[i]), atol=1e-12)


def test_vbpr_item_id_gradient_matches_closed_form():
    for seed in range(10):
        m = vbpr(seed)
        rng = np.random.default_rng(seed)
        u, i, j = (np.array([rng.integers(0, 3)]), np.array([0]), np.array([1 + rng.integers(0, 3)]))
        for p in m.parameters():
            p.zero_grad()
        with Tape() as tape:
            loss, _ = compute_loss(m, (u, i, j), 0.0)
        tape.backward(loss)
        z = m.score_parts(u, i)[0][0] - m.score_parts(u, j)[0][0]
        expected = (expit(z) - 1.0) * m.user_id.value[u[0]]
        assert np.abs(m.item_id.grad[i[0]] - expected).max() < 1e-10
        assert np.abs(m.item_id.grad[j[0]] + expected).max() < 1e-10


def test_mf_zero_embedding_scores_zero():
    m = MfModel(2, 3, 4, 0, np.float64)
    m.user_emb.value[0] = 0.0
    assert mf_score(m, 0, 2) == 0.0


def test_lightgcn_single_edge_hand_case():
    adj = build_norm_adjacency(1, 1, [0], [0], np.float64)
    m = LightGcnModel(1, 1, adj, 2, 2, 0, np.float64)
    m.user_emb.value[:] = [[1.0, 0.0]]
    m.item_emb.value[:] = [[0.0, 2.0]]
    u, i = lightgcn_forward(m.user_emb, m.item_emb, adj, 2)
    # layers: (e, x), (x, e), (e, x) summed
    np.testing.assert_allclose(u.value, [[2.0, 2.0]])
    np.testing.assert_allclose(i.value, [[1.0, 4.0]])


def _models(seed):
    adj = build_norm_adjacency(3, 4, USERS, ITEMS, np.float64)
    return {"mf": MfModel(3, 4, 3, seed, np.float64),
            "lightgcn": LightGcnModel(3, 4, adj, 3, 2, seed, np.float64),
            "vbpr": vbpr(seed)}


@pytest.mark.parametrize("name", ["mf", "lightgcn", "vbpr"])
def test_baseline_gradients(name):
    worst = 0.0
    for seed in range(20):
        m = _models(seed)[name]
        errs = grad_check(lambda: compute_loss(m, TRIPLES, 0.01)[0], m.parameters())
        worst = max(worst, max(errs.values()))
    assert worst < 1e-4


def test_every_model_runs_through_the_same_harness():
    ds, feats = latent_factor_world(60, 40, per_user=(6, 10), seed=0)
    ds = split_random(ds, seed=0)
    for name in ("lirdrec", "mf", "lightgcn", "vbpr"):
        cfg = TrainConfig(model=name, epochs=1, batch_size=128, dim=8, hidden=16, knn_k=3)
        model = build_model(cfg, prepare(ds, feats, cfg))
        result = fit(model, ds, cfg)
        assert result.epochs_run == 1
        assert {row[1] for row in result.log} == {"train", "valid"}
