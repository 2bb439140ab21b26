"""BPR sampling, loss, the epoch loop with early stopping, and grid search."""
import copy
import csv
import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import LightGcnModel, MfModel, VbprModel
from .dataio import Split
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import evaluate
from .graphs import DEFAULT_FUSION, build_item_graph, build_norm_adjacency
from .mft import shared_dct_input
from .model import LirdrecModel
from .tensor import Adam, Tape, load_checkpoint, save_checkpoint, add, dot_rows, mean, scale, softplus_neg, sub, sum_squares

logger = logging.getLogger(__name__)

MODELS = ("lirdrec", "mf", "lightgcn", "vbpr")
LOG_HEADER = ("epoch", "split", "metric", "k", "value", "wallclock_s")


@dataclass
class TrainConfig:
    model: str = "lirdrec"
    dim: int = 64
    hidden: int = 256
    pwc_hidden: int = 32
    ui_layers: int = 2
    ii_layers: int = 1
    reg: float = 1e-4
    tau: float = 0.9
    gamma: float = 0.99
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 1000
    patience: int = 20
    seed: int = 0
    pwc: bool = True
    pwc_softmax: bool = True
    theta_scope: str = "global"
    use_shared: bool = True
    reg_negative: bool = False
    knn_k: int = 10
    fusion: dict = field(default_factory=lambda: dict(DEFAULT_FUSION))
    lightgcn_layers: int = 2
    dtype: str = "float32"
    ks: tuple = (10, 20)
    valid_k: int = 20
    checked: bool = False

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        self.validate()

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"train.{name}: {msg}")

        if self.model not in MODELS:
            bad("model", f"must be one of {MODELS}, got {self.model!r}")
        for name in ("dim", "hidden", "pwc_hidden", "batch_size", "epochs", "patience", "knn_k"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        for name in ("ui_layers", "ii_layers", "lightgcn_layers"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        for name in ("tau", "gamma"):
            if not 0 < getattr(self, name) < 1:
                bad(name, "must lie in (0, 1)")
        if self.reg < 0:
            bad("reg", "must be >= 0")
        if self.lr < 0:
            bad("lr", "must be >= 0")
        if self.theta_scope not in ("global", "per_user"):
            bad("theta_scope", "must be 'global' or 'per_user'")
        if self.dtype not in ("float32", "float64"):
            bad("dtype", "must be 'float32' or 'float64'")
        if self.valid_k not in self.ks:
            bad("valid_k", f"must be one of ks={self.ks}")
        if abs(sum(self.fusion.values()) - 1.0) > 1e-9:
            bad("fusion", f"weights must sum to 1, got {sum(self.fusion.values())}")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise ConfigError(f"train.{unknown[0]}: unknown field")
        kwargs = {}
        for name, value in data.items():
            default = getattr(cls(), name)
            kwargs[name] = _coerce(name, value, default)
        return cls(**kwargs)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ks"] = list(self.ks)
        return d


def _coerce(name, value, default):
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"train.{name}: expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"train.{name}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"train.{name}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"train.{name}: expected a string, got {value!r}")
        return value
    if kind is tuple:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(f"train.{name}: expected a list of positive integers, got {value!r}")
        return tuple(value)
    if kind is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"train.{name}: expected an object, got {value!r}")
        return {str(k): float(v) for k, v in value.items()}
    return value


class BprSampler:
    """Shuffled pass over all train edges with one uniform negative per positive.

    Negatives are drawn by rejection for ``max_resample`` rounds; users still
    without a negative then draw exactly from their non-interacted items, and a
    user who has interacted with every item is an error.
    """

    def __init__(self, dataset, rng, max_resample=100):
        self.users, self.items = dataset.pairs(Split.TRAIN)
        if not len(self.users):
            raise DataError("no training interactions")
        self.num_items = dataset.num_items
        self.keys = np.unique(self.users * self.num_items + self.items)
        self.rng = rng
        self.max_resample = max_resample

    def is_positive(self, users, items):
        keys = users * self.num_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def _exact(self, user):
        lo, hi = np.searchsorted(self.keys, [user * self.num_items, (user + 1) * self.num_items])
        free = np.setdiff1d(np.arange(self.num_items), self.keys[lo:hi] - user * self.num_items)
        if not len(free):
            raise DataError(f"could not sample a negative for user {user}: it interacted with every item")
        return free[self.rng.integers(0, len(free))]

    def negatives(self, users):
        users = np.asarray(users, dtype=np.int64)
        neg = self.rng.integers(0, self.num_items, size=len(users))
        pending = np.nonzero(self.is_positive(users, neg))[0]
        for _ in range(self.max_resample):
            if not len(pending):
                return neg
            neg[pending] = self.rng.integers(0, self.num_items, size=len(pending))
            pending = pending[self.is_positive(users[pending], neg[pending])]
        for k in pending:
            neg[k] = self._exact(users[k])
        return neg

    def epoch(self, batch_size):
        order = self.rng.permutation(len(self.users))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            u = self.users[idx]
            yield u, self.items[idx], self.negatives(u)


def sample_bpr_batch(sampler, batch_size):
    """First batch of a fresh shuffled pass."""
    return next(sampler.epoch(batch_size))


def compute_loss(model, triples, reg, training=True, reg_negative=False):
    """Mean BPR loss plus ``reg * (|H_u|^2 + |H_i|^2)`` averaged over batch rows.

    Returns ``(loss_tensor, parts)`` with ``parts`` holding float ``bpr`` and
    ``reg`` components. Must run inside a :class:`Tape` for gradients.
    """
    users, pos, neg = triples
    out = model.forward_batch(users, pos, neg, training=training)
    diff = sub(dot_rows(out.users, out.pos), dot_rows(out.users, out.neg))
    bpr = mean(softplus_neg(diff))
    n = len(users)
    reg_terms = [sum_squares(out.users), sum_squares(out.pos)]
    if reg_negative:
        reg_terms.append(sum_squares(out.neg))
    penalty = reg_terms[0]
    for t in reg_terms[1:]:
        penalty = add(penalty, t)
    penalty = scale(penalty, reg / n)
    loss = add(bpr, penalty)
    return loss, {"bpr": float(bpr.value), "reg": float(penalty.value)}


@dataclass
class FitResult:
    log: list
    best_epoch: int
    best_valid: float
    epochs_run: int
    stopped_early: bool
    snapshot: dict = field(repr=False, default=None)
    optimizer: object = field(repr=False, default=None)


def snapshot(model):
    return {"params": {p.name: p.value.copy() for p in model.parameters()},
            "extra": copy.deepcopy(model.extra_state())}


def restore(model, snap):
    for p in model.parameters():
        p.value = snap["params"][p.name].copy()
    model.load_extra_state(copy.deepcopy(snap["extra"]))


def fit(model, dataset, config, log_path=None, batch_hook=None, epoch_hook=None, restore_best=True):
    """Train with Adam until validation R@valid_k stalls for ``patience`` epochs.

    The model is left holding the best-validation parameters unless
    ``restore_best`` is false. ``batch_hook``
    runs after backward and before the optimizer step with
    ``(model, triples, epoch)``.
    """
    rng = np.random.default_rng(config.seed)
    sampler = BprSampler(dataset, rng)
    optimizer = Adam(model.parameters(), lr=config.lr)
    log = []
    best_val, best_epoch, bad = -math.inf, 0, 0
    best = snapshot(model)
    start = time.perf_counter()
    stopped = False
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for triples in sampler.epoch(config.batch_size):
            optimizer.zero_grad()
            last_good = snapshot(model)
            with Tape(checked=config.checked) as tape:
                loss, _ = compute_loss(model, triples, config.reg, True, config.reg_negative)
            if not np.isfinite(loss.value):
                restore(model, last_good)
                raise DivergenceError(f"non-finite loss at epoch {epoch}", last_good=last_good)
            tape.backward(loss)
            if batch_hook is not None:
                batch_hook(model, triples, epoch)
            optimizer.step()
            model.step_end()
            losses.append(float(loss.value))
        elapsed = time.perf_counter() - start
        log.append((epoch, "train", "loss", 0, float(np.mean(losses)), elapsed))
        report = evaluate(model, dataset, Split.VALID, config.ks)
        elapsed = time.perf_counter() - start
        log.extend(report.rows(epoch, elapsed))
        score = report.recall[config.valid_k]
        logger.info("epoch %d loss %.5f %s", epoch, np.mean(losses), report)
        if epoch_hook is not None:
            epoch_hook(model, epoch, report)
        if score > best_val:
            best_val, best_epoch, bad = score, epoch, 0
            best = snapshot(model)
        else:
            bad += 1
            if bad >= config.patience:
                stopped = True
                break
    if restore_best:
        restore(model, best)
    if log_path is not None:
        write_log(log_path, log)
    return FitResult(log, best_epoch, best_val, epoch, stopped, best, optimizer)


def save_model(path, model, config, **info):
    """Checkpoint parameters with the config and non-trainable state in the sidecar."""
    extra = {"config": config.to_dict(), "model_state": model.extra_state(), **info}
    save_checkpoint(path, model.parameters(), extra=extra)


def load_model_state(path, model):
    """Load parameters saved by :func:`save_model` into ``model``; returns the sidecar extras."""
    values, _, meta = load_checkpoint(path)
    for p in model.parameters():
        if p.name not in values:
            raise DataError(f"{path}: checkpoint has no parameter {p.name!r}")
        if values[p.name].shape != p.shape:
            raise DataError(f"{path}: parameter {p.name!r} has shape {values[p.name].shape}, model expects {p.shape}")
        p.value = values[p.name].astype(p.value.dtype)
    model.load_extra_state(meta["extra"].get("model_state", {}))
    return meta["extra"]


def write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])


@dataclass
class Prepared:
    """Inputs shared by every model trained on one split."""

    dataset: object
    features: dict
    adjacency: object
    shared_input: object = None
    item_graph: object = None


def prepare(dataset, features, config, shared_input=None, item_graph=None, adjacency=None):
    """Build whatever caches were not supplied: DCT input, item graph, normalized adjacency."""
    features = {m: np.asarray(getattr(f, "values", f)) for m, f in features.items()}
    for fm in features.values():
        if fm.shape[0] != dataset.num_items:
            raise DataError(f"feature rows {fm.shape[0]} != num_items {dataset.num_items}")
    if adjacency is None:
        u, i = dataset.pairs(Split.TRAIN)
        adjacency = build_norm_adjacency(dataset.num_users, dataset.num_items, u, i)
    if config.model == "lirdrec":
        if shared_input is None and config.use_shared:
            shared_input = shared_dct_input(features)
        if item_graph is None and config.ii_layers > 0:
            weights = {m: config.fusion.get(m, 0.0) for m in features}
            total = sum(weights.values())
            weights = ({m: w / total for m, w in weights.items()} if total > 0
                       else {m: 1.0 / len(features) for m in features})
            item_graph = build_item_graph(features, config.knn_k, weights)
    return Prepared(dataset, features, adjacency, shared_input, item_graph)


def build_model(config, prepared):
    dtype = np.dtype(config.dtype)
    ds = prepared.dataset
    if config.model == "mf":
        return MfModel(ds.num_users, ds.num_items, config.dim, config.seed, dtype)
    if config.model == "lightgcn":
        return LightGcnModel(ds.num_users, ds.num_items, prepared.adjacency, config.dim,
                             config.lightgcn_layers, config.seed, dtype)
    if config.model == "vbpr":
        return VbprModel(ds.num_users, prepared.features, config.dim, config.seed, dtype)
    return LirdrecModel(
        ds.num_users, prepared.features, prepared.shared_input if config.use_shared else None,
        prepared.adjacency, prepared.item_graph,
        dim=config.dim, hidden=config.hidden, pwc_hidden=config.pwc_hidden,
        ui_layers=config.ui_layers, ii_layers=config.ii_layers, tau=config.tau, gamma=config.gamma,
        pwc=config.pwc, pwc_softmax=config.pwc_softmax, theta_scope=config.theta_scope,
        seed=config.seed, dtype=dtype)


def grid_search(base_config, grid, prepared, out_csv=None):
    """Exhaustive product over ``grid`` (field -> list of values); best by validation R@valid_k."""
    names = sorted(grid)
    leaderboard = []
    best_cfg, best_val = None, -math.inf
    for values in itertools.product(*(grid[n] for n in names)):
        overrides = dict(zip(names, values))
        cfg = TrainConfig.from_dict({**base_config.to_dict(), **overrides})
        result = fit(build_model(cfg, prepared), prepared.dataset, cfg)
        leaderboard.append({**overrides, "best_epoch": result.best_epoch, "valid": result.best_valid})
        if result.best_valid > best_val:
            best_val, best_cfg = result.best_valid, cfg
    leaderboard.sort(key=lambda r: -r["valid"])
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=names + ["best_epoch", "valid"])
            w.writeheader()
            w.writerows(leaderboard)
    return best_cfg, leaderboard
