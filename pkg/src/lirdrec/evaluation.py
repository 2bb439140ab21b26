"""All-ranking Recall@K / NDCG@K."""
from dataclasses import dataclass, field

import numpy as np

from .dataio import Split

DEFAULT_KS = (10, 20)


def _discounts(n):
    return 1.0 / np.log2(np.arange(n, dtype=np.float64) + 2.0)


def recall_at_k(ranked, relevant, k):
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ValueError("empty relevant set")
    hits = sum(1 for item in list(ranked)[:k] if int(item) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k):
    """Binary-gain NDCG with discount ``1/log2(rank+1)`` (ranks from 1)."""
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ValueError("empty relevant set")
    top = list(ranked)[:k]
    gains = np.array([1.0 if int(item) in relevant else 0.0 for item in top])
    disc = _discounts(k)
    dcg = np.cumsum(gains * disc[:len(top)])[-1] if len(top) else 0.0
    idcg = np.cumsum(disc[:min(k, len(relevant))])[-1]
    return float(dcg / idcg)


def _batch_metrics(hits, n_relevant, ks):
    """Per-user recall/ndcg for a batch; ``hits`` is (n, kmax) bool in rank order."""
    kmax = hits.shape[1]
    disc = _discounts(kmax)
    dcg_cum = np.cumsum(hits * disc, axis=1)
    idcg_cum = np.cumsum(disc)
    hit_cum = np.cumsum(hits, axis=1)
    out = {}
    for k in ks:
        recall = hit_cum[:, k - 1] / n_relevant
        ideal = idcg_cum[np.minimum(k, n_relevant) - 1]
        out[k] = (recall, dcg_cum[:, k - 1] / ideal)
    return out


@dataclass
class MetricsReport:
    split: str
    ks: tuple
    recall: dict
    ndcg: dict
    num_users: int
    skipped_users: int = 0
    per_user: dict = field(default_factory=dict, repr=False)

    def rows(self, epoch=None, wallclock=0.0):
        out = []
        for k in self.ks:
            out.append((epoch, self.split, "recall", k, self.recall[k], wallclock))
            out.append((epoch, self.split, "ndcg", k, self.ndcg[k], wallclock))
        return out

    def __str__(self):
        parts = [f"R@{k}={self.recall[k]:.4f} N@{k}={self.ndcg[k]:.4f}" for k in self.ks]
        return f"[{self.split}] " + " ".join(parts) + f" (users={self.num_users})"


def _mask_splits(split):
    split = Split(split)
    if split == Split.TEST:
        return (Split.TRAIN, Split.VALID)
    if split == Split.VALID:
        return (Split.TRAIN,)
    return ()


def evaluate_scores(score_fn, dataset, split, ks=DEFAULT_KS, batch_users=1024, keep_per_user=False):
    """Evaluate ``score_fn(user_indices) -> (n, |I|) scores`` on ``split``.

    Items from earlier splits are masked (train for valid; train+valid for
    test). Users without ground truth in ``split`` are skipped. Score ties rank
    the lower item index first.
    """
    ks = tuple(sorted(int(k) for k in ks))
    kmax = ks[-1]
    truth = dataset.matrix(split)
    masked = dataset.matrix(*_mask_splits(split)) if _mask_splits(split) else None
    n_rel = np.diff(truth.indptr)
    users = np.nonzero(n_rel > 0)[0]
    skipped = int(np.count_nonzero(np.bincount(dataset.users, minlength=dataset.num_users)) - len(users))
    recall = {k: [] for k in ks}
    ndcg = {k: [] for k in ks}
    for start in range(0, len(users), batch_users):
        batch = users[start:start + batch_users]
        scores = np.array(score_fn(batch), dtype=np.float64)
        if masked is not None:
            m = masked[batch]
            rows = np.repeat(np.arange(len(batch)), np.diff(m.indptr))
            scores[rows, m.indices] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        valid = np.isfinite(np.take_along_axis(scores, order, axis=1))
        gt = truth[batch].toarray() > 0
        hits = np.take_along_axis(gt, order, axis=1) & valid
        if hits.shape[1] < kmax:
            hits = np.pad(hits, ((0, 0), (0, kmax - hits.shape[1])))
        for k, (r, n) in _batch_metrics(hits, n_rel[batch], ks).items():
            recall[k].append(r)
            ndcg[k].append(n)
    per_user = {}
    rec_mean, ndcg_mean = {}, {}
    for k in ks:
        r = np.concatenate(recall[k]) if recall[k] else np.zeros(0)
        n = np.concatenate(ndcg[k]) if ndcg[k] else np.zeros(0)
        rec_mean[k] = float(r.mean()) if len(r) else 0.0
        ndcg_mean[k] = float(n.mean()) if len(n) else 0.0
        if keep_per_user:
            per_user[k] = (users, r, n)
    name = Split(split).name.lower()
    return MetricsReport(name, ks, rec_mean, ndcg_mean, len(users), skipped, per_user)


def evaluate(model, dataset, split, ks=DEFAULT_KS, batch_users=1024):
    """All-ranking evaluation of a model exposing ``full_representations()``."""
    user_reps, item_reps = model.full_representations()
    user_reps = np.asarray(user_reps)
    item_t = np.ascontiguousarray(np.asarray(item_reps).T)
    return evaluate_scores(lambda b: user_reps[b] @ item_t, dataset, split, ks, batch_users)
