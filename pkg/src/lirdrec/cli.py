"""Command-line entry point: ``lirdrec <subcommand> --config run.json --out DIR``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .dataio import (FeatureMatrix, InteractionFormat, Split, load_features, load_interactions,
                     load_mmrec_dataset, split_cold_start, split_random, store_features,
                     subsample_users, write_interactions)
from .errors import ConfigError, DataError, DivergenceError, NonFiniteError
from .evaluation import evaluate
from .graphs import (build_item_graph, build_norm_adjacency, load_graph, load_norm_adjacency,
                     store_graph, store_norm_adjacency)
from .mft import shared_dct_input
from .synthetic import latent_factor_world, uniform_sparse
from .training import (MODELS, Prepared, TrainConfig, build_model, fit, grid_search, load_model_state,
                       prepare, save_model, write_log)

logger = logging.getLogger("lirdrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

DATASET_FILE = "interactions.tsv"
FEATURE_DIR = "features"
SHARED_FILE = "shared_dct.fmx"
GRAPH_FILE = "item_graph.grx"
ADJ_FILE = "norm_adjacency.grx"
CHECKPOINT_FILE = "model.fmx"

PRODUCERS = {DATASET_FILE: "preprocess", "features.json": "preprocess", FEATURE_DIR: "preprocess",
             SHARED_FILE: "preprocess", GRAPH_FILE: "build-graph", ADJ_FILE: "build-graph",
             CHECKPOINT_FILE: "train"}


@dataclass
class DataConfig:
    source: str = "synthetic"            # synthetic | tsv | mmrec
    interactions: str = ""               # tsv path
    features: dict = field(default_factory=dict)   # modality -> .npy or .fmx path
    dense_ids: bool = True
    root: str = ""                       # mmrec directory
    name: str = ""                       # mmrec dataset name
    synthetic: str = "latent"            # latent | uniform
    num_users: int = 300
    num_items: int = 200
    density: float = 0.01
    split: str = "random"                # given | random | cold_start
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    holdout_fraction: float = 0.2
    subsample_users: int = 0
    seed: int = 0


@dataclass
class DiagnoseConfig:
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 2048
    startup_models: list = field(default_factory=lambda: ["lirdrec", "lightgcn"])
    startup_epochs: int = 5


def _section(cls, raw, name):
    raw = dict(raw or {})
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
        expect = type(getattr(defaults, key))
        ok = isinstance(value, expect) and not (expect is not bool and isinstance(value, bool))
        if expect is float and isinstance(value, int) and not isinstance(value, bool):
            value, ok = float(value), True
        if not ok:
            raise ConfigError(f"{name}.{key}: expected {expect.__name__}, got {value!r}")
        raw[key] = value
    return cls(**raw)


@dataclass
class RunConfig:
    data: DataConfig
    train: TrainConfig
    diagnose: DiagnoseConfig
    grid: dict

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        unknown = sorted(set(raw) - {"data", "train", "diagnose", "grid"})
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown section")
        data = _section(DataConfig, raw.get("data"), "data")
        if data.source not in ("synthetic", "tsv", "mmrec"):
            raise ConfigError(f"data.source: must be synthetic, tsv or mmrec, got {data.source!r}")
        if data.split not in ("given", "random", "cold_start"):
            raise ConfigError(f"data.split: must be given, random or cold_start, got {data.split!r}")
        grid = raw.get("grid") or {}
        if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
            raise ConfigError("grid: expected an object mapping train fields to non-empty lists")
        return cls(data, TrainConfig.from_dict(raw.get("train")),
                   _section(DiagnoseConfig, raw.get("diagnose"), "diagnose"), grid)

    def to_dict(self):
        return {"data": dataclasses.asdict(self.data), "train": self.train.to_dict(),
                "diagnose": dataclasses.asdict(self.diagnose), "grid": self.grid}


def git_blob_sha1(path):
    """Content hash identical to ``git hash-object``."""
    with open(path, "rb") as fh:
        payload = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


class Run:
    """Per-invocation context: resolved config, output dir, hashed inputs."""

    def __init__(self, args):
        self.args = args
        raw = {}
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    raw = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if "config" in raw and "command" in raw:
            raw = raw["config"]  # replaying a run.json
        self.config = RunConfig.from_dict(raw)
        if getattr(args, "model", None):
            self.config.train = dataclasses.replace(self.config.train, model=args.model)
        if args.seed is not None:
            self.config.data.seed = args.seed
            self.config.train = dataclasses.replace(self.config.train, seed=args.seed)
        self.out = args.out
        caches = [os.path.abspath(c) for c in (getattr(args, "cache", None) or [])]
        if os.path.abspath(self.out) in caches:
            raise ConfigError("--out must differ from every --cache directory")
        os.makedirs(self.out, exist_ok=True)
        self.caches = caches
        self.inputs = {}
        if args.config:
            self.hash_input(args.config)

    def hash_input(self, path):
        if os.path.isfile(path):
            self.inputs[os.path.abspath(path)] = git_blob_sha1(path)

    def path(self, name):
        return os.path.join(self.out, name)

    def cached(self, name, required=True):
        for root in self.caches:
            p = os.path.join(root, name)
            if os.path.exists(p):
                return p
        if required:
            where = ", ".join(self.caches) or "(no --cache given)"
            raise DataError(f"missing cache {name!r} in {where}; "
                            f"produce it with `lirdrec {PRODUCERS.get(name, 'preprocess')}`")
        return None

    def write_manifest(self, **extra):
        manifest = {"command": self.args.command, "config": self.config.to_dict(),
                    "inputs": dict(sorted(self.inputs.items())), **extra}
        with open(self.path("run.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


# -- data -------------------------------------------------------------------

def _load_feature_file(run, modality, path):
    run.hash_input(path)
    if path.endswith(".npy"):
        return FeatureMatrix(modality, np.load(path))
    return load_features(path, modality)


def load_source(run):
    """Raw dataset and features as configured, before splitting."""
    cfg = run.config.data
    if cfg.source == "synthetic":
        if cfg.synthetic == "uniform":
            return uniform_sparse(cfg.num_users, cfg.num_items, cfg.density, seed=cfg.seed)
        if cfg.synthetic == "latent":
            return latent_factor_world(cfg.num_users, cfg.num_items, seed=cfg.seed)
        raise ConfigError(f"data.synthetic: must be latent or uniform, got {cfg.synthetic!r}")
    if cfg.source == "mmrec":
        if not cfg.root or not cfg.name:
            raise ConfigError("data.root and data.name are required for source 'mmrec'")
        dataset, features = load_mmrec_dataset(cfg.root, cfg.name)
        run.hash_input(os.path.join(cfg.root, f"{cfg.name}.inter"))
        for fname in ("image_feat.npy", "text_feat.npy"):
            run.hash_input(os.path.join(cfg.root, fname))
        return dataset, features
    if not cfg.interactions:
        raise ConfigError("data.interactions is required for source 'tsv'")
    run.hash_input(cfg.interactions)
    dataset = load_interactions(cfg.interactions, InteractionFormat(dense_ids=cfg.dense_ids))
    features = {m: _load_feature_file(run, m, p) for m, p in cfg.features.items()}
    return dataset, features


def split_source(run, dataset):
    """Apply the configured split; returns ``(dataset, cold_start_split_or_None)``."""
    cfg = run.config.data
    if cfg.subsample_users:
        dataset = subsample_users(dataset, cfg.subsample_users, cfg.seed)
    if cfg.split == "random":
        return split_random(dataset, tuple(cfg.ratios), cfg.seed), None
    if cfg.split == "cold_start":
        cs = split_cold_start(dataset, cfg.holdout_fraction, cfg.seed)
        return cs.dataset, cs
    return dataset, None


def load_cached_inputs(run, need_graphs=True):
    """Dataset, features, and (optionally) graph caches from ``--cache`` dirs."""
    with open(run.cached("features.json"), encoding="utf-8") as fh:
        shape = json.load(fh)
    ds_path = run.cached(DATASET_FILE)
    run.hash_input(ds_path)
    dataset = load_interactions(ds_path, InteractionFormat(True, shape["num_users"], shape["num_items"]))
    features = {}
    for modality in shape["modalities"]:
        p = run.cached(os.path.join(FEATURE_DIR, f"{modality}.fmx"))
        run.hash_input(p)
        features[modality] = load_features(p, modality)
        features[modality].check_items(dataset.num_items)
    shared = None
    if run.config.train.model == "lirdrec" and run.config.train.use_shared:
        p = run.cached(SHARED_FILE)
        run.hash_input(p)
        shared = load_features(p, "shared_dct").values
    adjacency = graph = None
    if need_graphs:
        p = run.cached(ADJ_FILE)
        run.hash_input(p)
        adjacency = load_norm_adjacency(p)
        if run.config.train.model == "lirdrec" and run.config.train.ii_layers > 0:
            p = run.cached(GRAPH_FILE)
            run.hash_input(p)
            graph = load_graph(p, "item_graph")
    return Prepared(dataset, {m: f.values for m, f in features.items()}, adjacency, shared, graph)


# -- subcommands --------------------------------------------------------------

def cmd_preprocess(run):
    dataset, features = load_source(run)
    dataset, _ = split_source(run, dataset)
    for fm in features.values():
        fm.check_items(dataset.num_items)
    write_interactions(dataset, run.path(DATASET_FILE))
    os.makedirs(run.path(FEATURE_DIR), exist_ok=True)
    for m, fm in features.items():
        store_features(fm, run.path(os.path.join(FEATURE_DIR, f"{m}.fmx")))
    shared = shared_dct_input({m: fm.values for m, fm in features.items()})
    store_features(FeatureMatrix("shared_dct", shared), run.path(SHARED_FILE))
    with open(run.path("features.json"), "w", encoding="utf-8") as fh:
        json.dump({"num_users": dataset.num_users, "num_items": dataset.num_items,
                   "modalities": list(features)}, fh, indent=2)
    run.write_manifest()
    logger.info("preprocessed %d interactions, %d items, modalities %s",
                len(dataset), dataset.num_items, list(features))


def cmd_build_graph(run):
    prepared = load_cached_inputs(run, need_graphs=False)
    cfg = run.config.train
    ds = prepared.dataset
    users, items = ds.pairs(Split.TRAIN)
    store_norm_adjacency(run.path(ADJ_FILE), build_norm_adjacency(ds.num_users, ds.num_items, users, items))
    weights = {m: cfg.fusion.get(m, 0.0) for m in prepared.features}
    total = sum(weights.values())
    weights = ({m: w / total for m, w in weights.items()} if total > 0
               else {m: 1.0 / len(weights) for m in weights})
    store_graph(run.path(GRAPH_FILE), build_item_graph(prepared.features, cfg.knn_k, weights), "item_graph")
    run.write_manifest(fusion_weights=weights)


def _report_rows(reports):
    rows = []
    for rep in reports:
        rows.extend(rep.rows(None, 0.0))
    return rows


def cmd_train(run):
    cfg = run.config.train
    prepared = load_cached_inputs(run)
    model = build_model(cfg, prepared)
    result = fit(model, prepared.dataset, cfg, log_path=run.path("train_log.csv"))
    save_model(run.path(CHECKPOINT_FILE), model, cfg, best_epoch=result.best_epoch)
    reports = [evaluate(model, prepared.dataset, s, cfg.ks) for s in (Split.VALID, Split.TEST)]
    write_log(run.path("metrics.csv"), _report_rows(reports))
    for rep in reports:
        print(rep)
    run.write_manifest(best_epoch=result.best_epoch, epochs_run=result.epochs_run,
                       metrics={r.split: {f"recall@{k}": r.recall[k] for k in r.ks} for r in reports})


def cmd_eval(run):
    ckpt = run.args.checkpoint
    if not ckpt or not os.path.exists(ckpt) or not os.path.exists(ckpt + ".json"):
        raise DataError(f"missing checkpoint {ckpt!r}; produce it with `lirdrec train`")
    with open(ckpt + ".json", encoding="utf-8") as fh:
        saved = json.load(fh)["extra"]["config"]
    run.config.train = TrainConfig.from_dict(saved)
    run.hash_input(ckpt)
    prepared = load_cached_inputs(run)
    model = build_model(run.config.train, prepared)
    load_model_state(ckpt, model)
    ks = tuple(int(k) for k in run.args.k.split(",")) if run.args.k else run.config.train.ks
    split = Split[run.args.split.upper()]
    report = evaluate(model, prepared.dataset, split, ks)
    write_log(run.path("metrics.csv"), report.rows(None, 0.0))
    print(report)
    run.write_manifest(metrics={f"recall@{k}": report.recall[k] for k in ks})


def cmd_coldstart(run):
    run.config.data.split = "cold_start"
    cfg = run.config.train
    dataset, features = load_source(run)
    dataset, cs = split_source(run, dataset)
    prepared = prepare(dataset, features, cfg)
    model = build_model(cfg, prepared)
    result = fit(model, dataset, cfg, log_path=run.path("train_log.csv"))
    report = evaluate(model, dataset, Split.TEST, cfg.ks)
    write_log(run.path("metrics.csv"), report.rows(None, 0.0))
    u, i = dataset.pairs(Split.TEST)
    with open(run.path("test_truth.tsv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(("user", "item"))
        w.writerows(zip(u.tolist(), i.tolist()))
    with open(run.path("coldstart_items.json"), "w", encoding="utf-8") as fh:
        json.dump({"valid_items": cs.valid_items.tolist(), "test_items": cs.test_items.tolist()}, fh)
    print(report)
    run.write_manifest(best_epoch=result.best_epoch,
                       metrics={f"recall@{k}": report.recall[k] for k in report.ks})


def cmd_diagnose(run):
    from .baselines import VbprModel
    from .diagnostics import gradient_disparity, startup_curve, write_curve

    dcfg = run.config.diagnose
    cfg = run.config.train
    dataset, features = load_source(run)
    train_only = dataset.with_splits(np.zeros(len(dataset), dtype=np.int8))
    vbpr = VbprModel(dataset.num_users, features, cfg.dim, cfg.seed, np.dtype(cfg.dtype))
    series = gradient_disparity(vbpr, train_only, dcfg.epochs, dcfg.lr, dcfg.batch_size,
                                cfg.reg, cfg.seed)
    write_curve(run.path("disparity.csv"), series.rows())
    extra = {"disparity": {"mm": series.mm, "id": series.id}}
    if dcfg.startup_models:
        split, _ = split_source(run, dataset)
        entries = {}
        for name in dcfg.startup_models:
            mcfg = dataclasses.replace(cfg, model=name)
            mcfg.validate()
            entries[name] = (build_model(mcfg, prepare(split, features, mcfg)), mcfg)
        startup_curve(entries, split, dcfg.startup_epochs, run.path("startup.csv"))
    run.write_manifest(**extra)


def cmd_grid(run):
    if not run.config.grid:
        raise ConfigError("grid: no grid given in the config")
    prepared = load_cached_inputs(run)
    best, board = grid_search(run.config.train, run.config.grid, prepared, run.path("leaderboard.csv"))
    with open(run.path("best_config.json"), "w", encoding="utf-8") as fh:
        json.dump(best.to_dict(), fh, indent=2, sort_keys=True)
    run.write_manifest(best=board[0] if board else None)


COMMANDS = {"preprocess": cmd_preprocess, "build-graph": cmd_build_graph, "train": cmd_train,
            "eval": cmd_eval, "coldstart": cmd_coldstart, "diagnose": cmd_diagnose, "grid": cmd_grid}


def build_parser():
    parser = argparse.ArgumentParser(prog="lirdrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config; missing fields take defaults")
        p.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
        p.add_argument("--out", required=True, help="output directory (new files only)")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
        p.add_argument("--cache", action="append", help="directory with cached inputs (repeatable)")
        p.add_argument("--model", choices=MODELS, help="overrides train.model")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", help=f"{CHECKPOINT_FILE} written by `train`")
            p.add_argument("--split", choices=("valid", "test"), default="test")
            p.add_argument("--k", help="comma-separated cutoffs, e.g. 10,20")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            run = Run(args)
            COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
