"""LIRDRec: item representations built only from multimodal features.

Dataflow per training step::

    X~ = [proj_0(X^0) | ... | proj_sh(DCT(X^0) | ...)]       latent items
    (E_u, X~_i) = LightGCN(E, X~) on the user-item graph     sum readout
    H~_i = S^L_ii X~_i + X~_i                                 item-item stage
    H_u = progressive-weight-copying fusion of E_u chunks
    score(u, i) = <H_u, H~_i>
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .mft import MultimodalTransform
from .tensor import (Parameter, Tensor, add, add_bias, chunk_scale, concat_cols, gather_rows,
                     leaky_relu, matmul, scale, slice_cols, softmax_rows, spmm, xavier_uniform, DEFAULT_SLOPE)


@dataclass
class BatchOutput:
    """Representations for a batch of (u, i, j) triples; scores are row-wise dot products."""

    users: Tensor
    pos: Tensor
    neg: Tensor


def forward_ui_gcn(user_emb, item_latent, adjacency, num_layers):
    """LightGCN over the bipartite graph with a sum readout over layers 0..L."""
    e, x = user_emb, item_latent
    e_sum, x_sum = e, x
    for _ in range(num_layers):
        e, x = spmm(adjacency.user_item, x), spmm(adjacency.item_user, e)
        e_sum, x_sum = add(e_sum, e), add(x_sum, x)
    return e_sum, x_sum


def forward_ii_gcn(items, item_graph, num_layers):
    """``S^L X + X``; ``num_layers == 0`` skips the item-item stage entirely."""
    if num_layers == 0:
        return items
    h = items
    for _ in range(num_layers):
        h = spmm(item_graph, h)
    return add(h, items)


class PwcEncoders:
    """One small network per chunk mapping a d-wide chunk to a scalar weight."""

    def __init__(self, num_chunks, chunk_dim, hidden, rng, dtype=np.float32, slope=DEFAULT_SLOPE):
        self.num_chunks, self.chunk_dim, self.slope = num_chunks, chunk_dim, slope
        self.layers = []
        for b in range(num_chunks):
            self.layers.append((
                Parameter(xavier_uniform(rng, (chunk_dim, hidden), dtype), f"pwc.{b}.w1"),
                Parameter(np.zeros(hidden, dtype=dtype), f"pwc.{b}.b1"),
                Parameter(xavier_uniform(rng, (hidden, 1), dtype), f"pwc.{b}.w2"),
                Parameter(np.zeros(1, dtype=dtype), f"pwc.{b}.b2"),
            ))

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def __call__(self, user_rows):
        return pwc_weights(self, user_rows)


def pwc_weights(encoders, user_rows):
    """Raw chunk weights ``a`` (batch x B): ``a_b = leaky(E^b W1 + b1) W2 + b2``."""
    width = user_rows.shape[1]
    if width != encoders.num_chunks * encoders.chunk_dim:
        raise ShapeError(f"user width {width} != {encoders.num_chunks} chunks x {encoders.chunk_dim}")
    outs = []
    for b, (w1, b1, w2, b2) in enumerate(encoders.layers):
        chunk = slice_cols(user_rows, b * encoders.chunk_dim, (b + 1) * encoders.chunk_dim)
        hidden = leaky_relu(add_bias(matmul(chunk, w1), b1), encoders.slope)
        outs.append(add_bias(matmul(hidden, w2), b2))
    return concat_cols(outs)


class PwcState:
    """Target vector theta plus the decay schedule (tau, gamma, n).

    theta is copied, never trained. With ``scope="global"`` it holds B scalars
    refreshed from the batch mean; with ``scope="per_user"`` one row per user.
    """

    def __init__(self, num_chunks, tau=0.9, gamma=0.99, scope="global", num_users=None, dtype=np.float32):
        if not (0 < tau < 1 and 0 < gamma < 1):
            raise ValueError("tau and gamma must lie in (0, 1)")
        if scope not in ("global", "per_user"):
            raise ValueError(f"unknown theta scope {scope!r}")
        self.scope = scope
        shape = (num_chunks,) if scope == "global" else (num_users, num_chunks)
        self.theta = np.zeros(shape, dtype=dtype)
        self.tau = float(tau)
        self.gamma = float(gamma)
        self.n = 1

    def coefficients(self):
        """``(c_new, c_theta)`` blend coefficients for the current iteration."""
        eta = self.gamma ** self.n
        denom = self.tau * eta + 1.0 - self.tau
        return self.tau * eta / denom, (1.0 - self.tau) / denom

    def theta_rows(self, users):
        if self.scope == "global":
            return np.broadcast_to(self.theta, (len(users), len(self.theta)))
        return self.theta[users]

    def blend(self, raw, users):
        c_new, c_theta = self.coefficients()
        dtype = raw.value.dtype
        target = (c_theta * self.theta_rows(users)).astype(dtype)
        if self.scope == "global":
            return add_bias(scale(raw, c_new), target[0])
        return add(scale(raw, c_new), Tensor(np.ascontiguousarray(target)))

    def commit(self, blended, users):
        """Advance the schedule and copy the blended weights into theta."""
        eta = self.gamma ** self.n
        self.tau *= eta
        blended = np.asarray(blended, dtype=self.theta.dtype)
        if self.scope == "global":
            self.theta = blended.mean(axis=0)
        else:
            self.theta[users] = blended
        self.n += 1

    def state(self):
        return {"theta": self.theta.tolist(), "tau": self.tau, "gamma": self.gamma,
                "n": self.n, "scope": self.scope}

    def load_state(self, state):
        self.theta = np.asarray(state["theta"], dtype=self.theta.dtype).reshape(self.theta.shape)
        self.tau, self.gamma, self.n = float(state["tau"]), float(state["gamma"]), int(state["n"])


def pwc_blend_and_copy(raw, state, users=None):
    """Blend raw weights with theta, then copy the result into ``state`` (training mode)."""
    raw = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw))
    users = np.arange(raw.shape[0]) if users is None else np.asarray(users)
    blended = state.blend(raw, users)
    state.commit(blended.value, users)
    return blended


def fuse_user(user_rows, weights, use_softmax=True):
    """Scale each chunk of ``user_rows`` by its weight and re-concatenate."""
    w = softmax_rows(weights) if use_softmax else weights
    return chunk_scale(user_rows, w)


def score(user_reps, item_reps):
    return np.asarray(user_reps) @ np.asarray(item_reps).T


def recommend_topk(scores, k, mask=None):
    """Top-k item indices by descending score, ties to the lower index.

    ``mask`` (bool, same shape) marks excluded items; they never appear, so rows
    may return fewer than ``k`` items when too few remain.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if mask is not None:
        scores = np.where(np.atleast_2d(mask), -np.inf, scores)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    out = []
    for r in range(scores.shape[0]):
        row = order[r]
        out.append(row[np.isfinite(scores[r, row])] if mask is not None else row)
    return out


class LirdrecModel:
    def __init__(self, num_users, raw_features, shared_input, adjacency, item_graph, *,
                 dim=64, hidden=256, pwc_hidden=32, ui_layers=2, ii_layers=1,
                 tau=0.9, gamma=0.99, pwc=True, pwc_softmax=True, theta_scope="global",
                 slope=DEFAULT_SLOPE, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.num_users = num_users
        self.num_items = next(iter(raw_features.values())).shape[0]
        if adjacency.num_users != num_users or adjacency.num_items != self.num_items:
            raise ShapeError("adjacency shape does not match users/items")
        if item_graph is not None and item_graph.shape != (self.num_items, self.num_items):
            raise ShapeError("item graph shape does not match the item count")
        self.mft = MultimodalTransform(raw_features, shared_input, dim, hidden, rng, self.dtype, slope)
        self.num_chunks = self.mft.num_blocks
        self.dim = dim
        self.width = self.num_chunks * dim
        self.user_emb = Parameter(xavier_uniform(rng, (num_users, self.width), self.dtype), "user_emb")
        self.adjacency = adjacency.astype(self.dtype)
        self.item_graph = None if item_graph is None else item_graph.astype(self.dtype)
        self.ui_layers, self.ii_layers = ui_layers, ii_layers
        self.use_pwc, self.pwc_softmax = pwc, pwc_softmax
        self.encoders = PwcEncoders(self.num_chunks, dim, pwc_hidden, rng, self.dtype, slope)
        self.pwc = PwcState(self.num_chunks, tau, gamma, theta_scope, num_users, self.dtype)
        self._pending = None

    def parameters(self):
        params = [self.user_emb] + self.mft.parameters()
        if self.use_pwc:
            params += self.encoders.parameters()
        return params

    def propagate(self):
        """Full-graph forward: ``(E_u, H~_i)`` for every user and item."""
        latent = self.mft()
        users, items = forward_ui_gcn(self.user_emb, latent, self.adjacency, self.ui_layers)
        if self.item_graph is not None:
            items = forward_ii_gcn(items, self.item_graph, self.ii_layers)
        return users, items

    def _fuse(self, user_rows, users, training):
        if not self.use_pwc:
            # ablation: every chunk weighted 1/B, as softmax of equal logits would give
            return scale(user_rows, 1.0 / self.num_chunks)
        if training:
            raw = pwc_weights(self.encoders, user_rows)
            blended = self.pwc.blend(raw, users)
            self._pending = (blended.value.copy(), np.asarray(users))
            return fuse_user(user_rows, blended, self.pwc_softmax)
        logits = Tensor(np.ascontiguousarray(self.pwc.theta_rows(users), dtype=self.dtype))
        return fuse_user(user_rows, logits, self.pwc_softmax)

    def forward_batch(self, users, pos, neg, training=True):
        all_users, all_items = self.propagate()
        user_rows = gather_rows(all_users, users)
        return BatchOutput(self._fuse(user_rows, users, training),
                           gather_rows(all_items, pos), gather_rows(all_items, neg))

    def step_end(self):
        """Commit the PWC copy staged by the last training forward pass."""
        if self._pending is not None:
            self.pwc.commit(*self._pending)
            self._pending = None

    def full_representations(self):
        all_users, all_items = self.propagate()
        users = np.arange(self.num_users)
        return self._fuse(all_users, users, training=False).value, all_items.value

    def extra_state(self):
        return {"pwc": self.pwc.state()}

    def load_extra_state(self, state):
        self.pwc.load_state(state["pwc"])
