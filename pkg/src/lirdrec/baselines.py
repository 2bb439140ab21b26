"""Reference recommenders sharing the LIRDRec trainer/evaluator interface.

Every model exposes ``parameters()``, ``forward_batch(users, pos, neg, training)``,
``step_end()``, ``full_representations()`` and ``extra_state()``; scores are
dot products of the returned user and item representations.
"""
import numpy as np

from .model import BatchOutput, forward_ui_gcn
from .tensor import Parameter, Tensor, concat_cols, gather_rows, matmul, xavier_uniform


class _Stateless:
    def step_end(self):
        pass

    def extra_state(self):
        return {}

    def load_extra_state(self, state):
        pass


class MfModel(_Stateless):
    """BPR matrix factorization: ``score(u, i) = <e_u, e_i>``."""

    def __init__(self, num_users, num_items, dim=64, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.user_emb = Parameter(xavier_uniform(rng, (num_users, dim), dtype), "user_emb")
        self.item_emb = Parameter(xavier_uniform(rng, (num_items, dim), dtype), "item_emb")

    def parameters(self):
        return [self.user_emb, self.item_emb]

    def forward_batch(self, users, pos, neg, training=True):
        return BatchOutput(gather_rows(self.user_emb, users), gather_rows(self.item_emb, pos),
                           gather_rows(self.item_emb, neg))

    def full_representations(self):
        return self.user_emb.value, self.item_emb.value


class LightGcnModel(_Stateless):
    """ID embeddings propagated over the normalized user-item graph, summed over layers."""

    def __init__(self, num_users, num_items, adjacency, dim=64, layers=2, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.user_emb = Parameter(xavier_uniform(rng, (num_users, dim), dtype), "user_emb")
        self.item_emb = Parameter(xavier_uniform(rng, (num_items, dim), dtype), "item_emb")
        self.adjacency = adjacency.astype(dtype)
        self.layers = layers

    def parameters(self):
        return [self.user_emb, self.item_emb]

    def propagate(self):
        return lightgcn_forward(self.user_emb, self.item_emb, self.adjacency, self.layers)

    def forward_batch(self, users, pos, neg, training=True):
        u, i = self.propagate()
        return BatchOutput(gather_rows(u, users), gather_rows(i, pos), gather_rows(i, neg))

    def full_representations(self):
        u, i = self.propagate()
        return u.value, i.value


def lightgcn_forward(user_emb, item_emb, adjacency, layers):
    return forward_ui_gcn(user_emb, item_emb, adjacency, layers)


class VbprModel(_Stateless):
    """``x_u = [x_u^ID | p_u]``, ``x_i = [x_i^ID | W f_i]`` with ``f_i`` the concatenated raw features.

    The score splits exactly into an ID part ``<x_u^ID, x_i^ID>`` and a
    multimodal part ``<p_u, W f_i>``.
    """

    def __init__(self, num_users, features, dim=64, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        if isinstance(features, dict):
            features = np.concatenate([np.asarray(getattr(f, "values", f)) for f in features.values()], axis=1)
        self.features = np.ascontiguousarray(features, dtype=dtype)
        num_items, feat_dim = self.features.shape
        self.user_id = Parameter(xavier_uniform(rng, (num_users, dim), dtype), "user_id")
        self.user_pref = Parameter(xavier_uniform(rng, (num_users, dim), dtype), "user_pref")
        self.item_id = Parameter(xavier_uniform(rng, (num_items, dim), dtype), "item_id")
        self.proj = Parameter(xavier_uniform(rng, (feat_dim, dim), dtype), "proj")

    def parameters(self):
        return [self.user_id, self.user_pref, self.item_id, self.proj]

    def item_mm(self, items):
        return matmul(Tensor(self.features[np.asarray(items)]), self.proj)

    def _item_rep(self, items):
        return concat_cols([gather_rows(self.item_id, items), self.item_mm(items)])

    def forward_batch(self, users, pos, neg, training=True):
        user = concat_cols([gather_rows(self.user_id, users), gather_rows(self.user_pref, users)])
        return BatchOutput(user, self._item_rep(pos), self._item_rep(neg))

    def full_representations(self):
        users = np.concatenate([self.user_id.value, self.user_pref.value], axis=1)
        items = np.concatenate([self.item_id.value, self.features @ self.proj.value], axis=1)
        return users, items

    def score_parts(self, users, items):
        """Row-wise ``(total, id_part, mm_part)`` for paired ``users[k], items[k]``."""
        users, items = np.asarray(users), np.asarray(items)
        id_part = np.einsum("ij,ij->i", self.user_id.value[users], self.item_id.value[items])
        mm = self.features[items] @ self.proj.value
        mm_part = np.einsum("ij,ij->i", self.user_pref.value[users], mm)
        return id_part + mm_part, id_part, mm_part


def vbpr_score(model, user, item):
    total, id_part, mm_part = model.score_parts([user], [item])
    return float(total[0]), float(id_part[0]), float(mm_part[0])


def mf_score(model, user, item):
    return float(model.user_emb.value[user] @ model.item_emb.value[item])
