"""User-item and item-item propagation operators."""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import container
from .errors import FormatError, PreconditionError
from .tensor import spmm

logger = logging.getLogger(__name__)

DEFAULT_KNN_K = 10
DEFAULT_FUSION = {"visual": 0.1, "textual": 0.9}


@dataclass
class NormalizedAdjacency:
    """Bipartite block ``R`` of the symmetric-normalized interaction graph.

    ``R[u, i] = 1 / sqrt(|N_u| |N_i|)`` for each training edge. The full
    (|U|+|I|) square operator is ``[[0, R], [R^T, 0]]``; :meth:`full` builds it.
    """

    user_item: sp.csr_matrix
    item_user: sp.csr_matrix

    @property
    def num_users(self):
        return self.user_item.shape[0]

    @property
    def num_items(self):
        return self.user_item.shape[1]

    def full(self):
        return sp.bmat([[None, self.user_item], [self.item_user, None]], format="csr")

    def astype(self, dtype):
        return NormalizedAdjacency(self.user_item.astype(dtype), self.item_user.astype(dtype))


def build_norm_adjacency(num_users, num_items, users, items, dtype=np.float32):
    """Symmetric-normalized user-item block from training edges ``(users[k], items[k])``."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) == 0:
        raise PreconditionError("training split is empty")
    r = sp.csr_matrix((np.ones(len(users)), (users, items)), shape=(num_users, num_items))
    r.sum_duplicates()
    r.data[:] = 1.0
    du = np.asarray(r.sum(axis=1)).ravel()
    di = np.asarray(r.sum(axis=0)).ravel()
    n_iso_u, n_iso_i = int((du == 0).sum()), int((di == 0).sum())
    if n_iso_u or n_iso_i:
        logger.warning("normalized adjacency: %d isolated users, %d isolated items", n_iso_u, n_iso_i)
    inv_u = np.zeros_like(du)
    inv_u[du > 0] = du[du > 0] ** -0.5
    inv_i = np.zeros_like(di)
    inv_i[di > 0] = di[di > 0] ** -0.5
    norm = (sp.diags(inv_u) @ r @ sp.diags(inv_i)).tocsr().astype(dtype)
    norm.sort_indices()
    return NormalizedAdjacency(norm, norm.T.tocsr())


def unit_rows(features):
    """Rows scaled to unit L2 norm; zero rows stay zero so their cosine is 0."""
    x = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    out = np.zeros_like(x)
    nz = norms > 0
    out[nz] = x[nz] / norms[nz, None]
    return out


def _topk_lowest_index_ties(sim, k):
    """Column indices of the k largest entries per row; equal values prefer lower index."""
    n_rows, n_cols = sim.shape
    part = np.argpartition(-sim, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(sim, part, axis=1).min(axis=1)
    out = np.empty((n_rows, k), dtype=np.int64)
    for r in range(n_rows):
        row = sim[r]
        above = np.nonzero(row > kth[r])[0]
        if len(above) == k:
            out[r] = above
            continue
        ties = np.nonzero(row == kth[r])[0]
        out[r] = np.concatenate([above, ties[: k - len(above)]])
    return out


def build_knn_modality_graph(features, k=DEFAULT_KNN_K, block_size=1024):
    """Binary kNN graph over items by cosine similarity, symmetrized by max.

    Self-similarity is excluded and rows are processed in tiles of
    ``block_size`` to bound memory.
    """
    xn = unit_rows(features)
    n = xn.shape[0]
    if not 1 <= k < n:
        raise PreconditionError(f"k must satisfy 1 <= k < |I| = {n}, got {k}")
    cols = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, block_size):
        rows = np.arange(start, min(start + block_size, n))
        sim = xn[rows] @ xn.T
        sim[np.arange(len(rows)), rows] = -np.inf
        cols[rows] = _topk_lowest_index_ties(sim, k)
    directed = sp.csr_matrix((np.ones(n * k), (np.repeat(np.arange(n), k), cols.ravel())), shape=(n, n))
    sym = directed.maximum(directed.T).tocsr()
    sym.sort_indices()
    return sym


def fuse_and_normalize(graphs, weights, dtype=np.float32):
    """``D^-1/2 (sum_m w_m S_m) D^-1/2`` with ``D`` the fused degree matrix.

    ``graphs`` and ``weights`` are parallel sequences (or dicts keyed by
    modality); weights must sum to 1.
    """
    if isinstance(graphs, dict):
        keys = list(graphs)
        if not isinstance(weights, dict):
            raise PreconditionError("weights must be a dict when graphs is a dict")
        missing = [m for m in keys if m not in weights]
        if missing:
            raise PreconditionError(f"no fusion weight for modalities {missing}")
        graphs, weights = [graphs[m] for m in keys], [weights[m] for m in keys]
    weights = np.asarray(weights, dtype=np.float64)
    if len(graphs) != len(weights) or not len(graphs):
        raise PreconditionError("need one weight per modality graph")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise PreconditionError(f"fusion weights must sum to 1, got {weights.sum()}")
    fused = sum(w * sp.csr_matrix(g, dtype=np.float64) for w, g in zip(weights, graphs))
    fused = sp.csr_matrix(fused)
    fused.eliminate_zeros()
    deg = np.asarray(fused.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = deg[deg > 0] ** -0.5
    out = (sp.diags(inv) @ fused @ sp.diags(inv)).tocsr().astype(dtype)
    out.sort_indices()
    return out


def build_item_graph(features, k=DEFAULT_KNN_K, weights=None, dtype=np.float32):
    """kNN graph per modality, fused and normalized. ``features`` maps modality -> matrix."""
    if weights is None:
        weights = {m: DEFAULT_FUSION[m] for m in features} if set(features) <= set(DEFAULT_FUSION) \
            else {m: 1.0 / len(features) for m in features}
        total = sum(weights.values())
        weights = {m: w / total for m, w in weights.items()}
    per_modality = {m: build_knn_modality_graph(x, k) for m, x in features.items()}
    return fuse_and_normalize(per_modality, weights, dtype=dtype)


def propagate(operator, x):
    """Sparse-dense product shared by both propagation stages (differentiable in ``x``)."""
    return spmm(operator, x)


def store_graph(path, matrix, tag="item_graph"):
    with open(path, "wb") as fh:
        container.write_csr(fh, matrix, tag)


def load_graph(path, tag=None):
    with open(path, "rb") as fh:
        rec = container.read_csr(fh)
    if rec is None:
        raise FormatError(f"{path}: empty graph file")
    matrix, thash = rec
    if tag is not None and thash != container.tag_hash(tag):
        raise FormatError(f"{path}: graph tag does not match {tag!r}")
    return matrix


def store_norm_adjacency(path, adj):
    store_graph(path, adj.user_item, tag="norm_adjacency")


def load_norm_adjacency(path):
    r = load_graph(path, tag="norm_adjacency")
    return NormalizedAdjacency(r, r.T.tocsr())
