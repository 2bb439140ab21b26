"""Early-training evidence: VBPR loss decomposition, gradient disparity, startup curves."""
import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .training import BprSampler, compute_loss, fit
from .tensor import Adam, Tape

CURVE_HEADER = ("epoch", "series", "value")


def _softplus_neg(z):
    return np.logaddexp(0.0, -z)


def decompose_vbpr_loss(model, triples):
    """``(total, id_loss, mm_loss)``: BPR on full scores and on each score component alone.

    The components do not add up to the total; each is a BPR loss of one
    pathway's score difference.
    """
    users, pos, neg = (np.asarray(t) for t in triples)
    tot_i, id_i, mm_i = model.score_parts(users, pos)
    tot_j, id_j, mm_j = model.score_parts(users, neg)
    as64 = lambda a: np.asarray(a, dtype=np.float64)
    total = _softplus_neg(as64(tot_i) - as64(tot_j)).mean()
    id_loss = _softplus_neg(as64(id_i) - as64(id_j)).mean()
    mm_loss = _softplus_neg(as64(mm_i) - as64(mm_j)).mean()
    return float(total), float(id_loss), float(mm_loss)


def closed_form_vbpr_grads(model, triples):
    """Gradients of the summed (not averaged) BPR loss, derived by hand.

    Returns ``(grad_proj, grad_item_id, mm_flow, id_flow_per_item)`` where the
    flows are sums of per-triple gradient norms w.r.t. the positive item's
    multimodal vector ``W f_i`` and its ID vector ``x_i^ID``.
    """
    users, pos, neg = (np.asarray(t) for t in triples)
    f = model.features.astype(np.float64)
    uid = model.user_id.value.astype(np.float64)
    pref = model.user_pref.value.astype(np.float64)
    iid = model.item_id.value.astype(np.float64)
    w = model.proj.value.astype(np.float64)
    s_pos = np.einsum("ij,ij->i", uid[users], iid[pos]) + np.einsum("ij,ij->i", pref[users], f[pos] @ w)
    s_neg = np.einsum("ij,ij->i", uid[users], iid[neg]) + np.einsum("ij,ij->i", pref[users], f[neg] @ w)
    g = expit(s_pos - s_neg) - 1.0
    grad_proj = (f[pos] - f[neg]).T @ (g[:, None] * pref[users])
    grad_item = np.zeros_like(iid)
    np.add.at(grad_item, pos, g[:, None] * uid[users])
    np.add.at(grad_item, neg, -g[:, None] * uid[users])
    mm_flow = float(np.sum(np.abs(g) * np.linalg.norm(pref[users], axis=1)))
    id_flow = np.zeros(len(iid))
    np.add.at(id_flow, pos, np.abs(g) * np.linalg.norm(uid[users], axis=1))
    return grad_proj, grad_item, mm_flow, id_flow


@dataclass
class DisparitySeries:
    """Per-epoch norms; index 0 is the first epoch."""

    mm: list = field(default_factory=list)
    id: list = field(default_factory=list)
    mm_flow: list = field(default_factory=list)
    id_flow: list = field(default_factory=list)
    mm_check: list = field(default_factory=list)
    id_check: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    loss_id: list = field(default_factory=list)
    loss_mm: list = field(default_factory=list)

    def rows(self):
        out = []
        for name in ("mm", "id", "mm_flow", "id_flow", "loss_total", "loss_id", "loss_mm"):
            for e, v in enumerate(getattr(self, name), start=1):
                out.append((e, name, v))
        return out


def gradient_disparity(model, dataset, epochs=1, lr=1e-3, batch_size=2048, reg=0.0,
                       seed=0, fixed_triples=False, double_entry=False):
    """Accumulated gradient norms of the shared projection vs. item ID embeddings.

    Each epoch sums the gradient of the per-triple BPR loss over every training
    triple (taps read gradients before the Adam step). ``mm`` is the norm of the
    accumulated projection gradient; ``id`` is the mean over items of the norm
    of each item's accumulated ID-embedding gradient. ``fixed_triples`` reuses
    the first epoch's triples every epoch. ``double_entry`` also accumulates the
    hand-derived gradients into ``mm_check`` / ``id_check``. The decomposed
    VBPR loss is averaged over the epoch's triples before each step.
    """
    rng = np.random.default_rng(seed)
    sampler = BprSampler(dataset, rng)
    optimizer = Adam(model.parameters(), lr=lr)
    series = DisparitySeries()
    frozen = list(sampler.epoch(batch_size)) if fixed_triples else None
    for _ in range(epochs):
        acc_w = np.zeros(model.proj.shape, dtype=np.float64)
        acc_id = np.zeros(model.item_id.shape, dtype=np.float64)
        chk_w, chk_id = np.zeros_like(acc_w), np.zeros_like(acc_id)
        mm_flow, id_flow = 0.0, np.zeros(model.item_id.shape[0])
        losses, seen = np.zeros(3), 0
        batches = frozen if frozen is not None else sampler.epoch(batch_size)
        for triples in batches:
            optimizer.zero_grad()
            with Tape() as tape:
                loss, _ = compute_loss(model, triples, reg, training=True)
            tape.backward(loss)
            n = len(triples[0])
            losses += n * np.array(decompose_vbpr_loss(model, triples))
            seen += n
            acc_w += n * model.proj.grad
            acc_id += n * model.item_id.grad
            gw, gid, mf, idf = closed_form_vbpr_grads(model, triples)
            mm_flow += mf
            id_flow += idf
            if double_entry:
                chk_w += gw
                chk_id += gid
            optimizer.step()
        series.mm.append(float(np.linalg.norm(acc_w)))
        series.id.append(float(np.linalg.norm(acc_id, axis=1).mean()))
        series.mm_flow.append(mm_flow)
        series.id_flow.append(float(id_flow.mean()))
        for name, value in zip(("loss_total", "loss_id", "loss_mm"), losses / seen):
            getattr(series, name).append(float(value))
        if double_entry:
            series.mm_check.append(float(np.linalg.norm(chk_w)))
            series.id_check.append(float(np.linalg.norm(chk_id, axis=1).mean()))
    return series


def startup_curve(entries, dataset, epochs, out_csv=None):
    """Validation R@20 after each of the first ``epochs`` epochs for each model.

    ``entries`` maps series name -> ``(model, TrainConfig)``; every model sees
    the same dataset and split.
    """
    rows = []
    for name, (model, config) in entries.items():
        cfg = dataclasses.replace(config, epochs=epochs, patience=epochs + 1)

        def hook(_model, epoch, report, name=name, k=cfg.valid_k):
            rows.append((epoch, name, report.recall[k]))

        fit(model, dataset, cfg, epoch_hook=hook)
    if out_csv is not None:
        write_curve(out_csv, rows)
    return rows


def write_curve(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        w.writerows(rows)
