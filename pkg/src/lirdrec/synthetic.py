"""Synthetic interaction worlds for tests and offline runs."""
import numpy as np

from .dataio import Dataset, FeatureMatrix, Split


def uniform_sparse(num_users=200, num_items=100, density=0.01, feat_dims=(32, 16), seed=0):
    """Uniform random bipartite edges and standard-normal features.

    All edges are labelled train. Feature modalities are named ``visual`` and
    ``textual`` (first two dims) or ``m<k>`` beyond that.
    """
    rng = np.random.default_rng(seed)
    n_edges = max(1, int(round(density * num_users * num_items)))
    flat = rng.choice(num_users * num_items, size=n_edges, replace=False)
    users, items = np.divmod(flat, num_items)
    ds = Dataset(num_users, num_items, users, items, np.full(n_edges, Split.TRAIN))
    return ds, _gaussian_features(rng, num_items, feat_dims)


def dense_bipartite(num_users, num_items, missing_per_user=1, feat_dims=(32, 16), seed=0):
    """Each user interacts with all but ``missing_per_user`` random items (the dense limit).

    The missing items keep BPR negative sampling possible.
    """
    rng = np.random.default_rng(seed)
    users, items = [], []
    for u in range(num_users):
        keep = np.sort(rng.permutation(num_items)[missing_per_user:])
        users.append(np.full(len(keep), u))
        items.append(keep)
    users, items = np.concatenate(users), np.concatenate(items)
    ds = Dataset(num_users, num_items, users, items, np.full(len(users), Split.TRAIN))
    return ds, _gaussian_features(rng, num_items, feat_dims)


def _modality_names(n):
    base = ["visual", "textual"]
    return [base[k] if k < 2 else f"m{k}" for k in range(n)]


def _gaussian_features(rng, num_items, feat_dims):
    return {name: FeatureMatrix(name, rng.standard_normal((num_items, d)))
            for name, d in zip(_modality_names(len(feat_dims)), feat_dims)}


def latent_factor_world(num_users=300, num_items=200, latent_dim=8, per_user=(8, 20),
                        feat_dims=(48, 24), feature_noise=0.5, temperature=1.0, seed=0):
    """Interactions drawn from user/item taste vectors that the features reveal.

    Each item has a latent vector ``v_i``; each modality observes
    ``v_i A_m + noise`` through a fixed random map ``A_m``. User ``u`` picks
    ``n_u`` distinct items with probability proportional to
    ``exp(<p_u, v_i> / temperature)``. The result is unsplit (all train).
    """
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((num_users, latent_dim))
    v = rng.standard_normal((num_items, latent_dim))
    logits = p @ v.T / (temperature * np.sqrt(latent_dim))
    users, items = [], []
    for u in range(num_users):
        n_u = int(rng.integers(per_user[0], per_user[1] + 1))
        w = np.exp(logits[u] - logits[u].max())
        # Gumbel top-k == sampling without replacement proportional to w
        keys = np.log(w) + rng.gumbel(size=num_items)
        chosen = np.argsort(-keys, kind="stable")[:n_u]
        users.append(np.full(n_u, u))
        items.append(chosen)
    users = np.concatenate(users)
    items = np.concatenate(items)
    ds = Dataset(num_users, num_items, users, items, np.full(len(users), Split.TRAIN))
    features = {}
    for name, d in zip(_modality_names(len(feat_dims)), feat_dims):
        a = rng.standard_normal((latent_dim, d)) / np.sqrt(latent_dim)
        features[name] = FeatureMatrix(name, v @ a + feature_noise * rng.standard_normal((num_items, d)))
    return ds, features
