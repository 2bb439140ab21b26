"""Interaction data, splits, and feature matrices."""
import csv
import logging
import math
import os
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from . import container
from .errors import DataError, DimensionError, FormatError, ParseError, PreconditionError

logger = logging.getLogger(__name__)


class Split(IntEnum):
    TRAIN = 0
    VALID = 1
    TEST = 2


class InteractionRecord(NamedTuple):
    user_id: int
    item_id: int
    split_label: Split


@dataclass
class InteractionFormat:
    """How to read an interaction TSV.

    ``dense_ids`` treats the user/item columns as already-dense integer indices
    (required whenever feature rows are aligned to item ids, as in the public
    multimodal benchmarks). Otherwise ids are arbitrary strings re-indexed by
    first appearance.
    """

    dense_ids: bool = False
    num_users: Optional[int] = None
    num_items: Optional[int] = None
    dedupe: bool = False


@dataclass
class Dataset:
    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    splits: np.ndarray
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int8)
        if not (len(self.users) == len(self.items) == len(self.splits)):
            raise DataError("users/items/splits arrays differ in length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError(f"item index out of range [0, {self.num_items})")
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(self.num_users)]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(self.num_items)]

    def __len__(self):
        return len(self.users)

    @property
    def records(self):
        return [InteractionRecord(int(u), int(i), Split(int(s)))
                for u, i, s in zip(self.users, self.items, self.splits)]

    @property
    def user_index(self):
        return {ext: k for k, ext in enumerate(self.user_ids)}

    @property
    def item_index(self):
        return {ext: k for k, ext in enumerate(self.item_ids)}

    def pairs(self, split):
        mask = self.splits == int(split)
        return self.users[mask], self.items[mask]

    def matrix(self, *splits):
        """Binary |U|x|I| CSR matrix of the interactions in ``splits``."""
        mask = np.isin(self.splits, [int(s) for s in splits])
        data = np.ones(int(mask.sum()), dtype=np.float32)
        m = sp.csr_matrix((data, (self.users[mask], self.items[mask])),
                          shape=(self.num_users, self.num_items))
        m.sum_duplicates()
        m.data[:] = 1.0
        return m

    def user_item_lists(self, split):
        m = self.matrix(split)
        return [m.indices[m.indptr[u]:m.indptr[u + 1]] for u in range(self.num_users)]

    def with_splits(self, splits):
        return Dataset(self.num_users, self.num_items, self.users.copy(), self.items.copy(),
                       np.asarray(splits, dtype=np.int8), list(self.user_ids), list(self.item_ids))

    def check_general_split(self):
        """Raise unless every user has >=3 train, >=1 valid and >=1 test records."""
        counts = np.zeros((self.num_users, 3), dtype=np.int64)
        np.add.at(counts, (self.users, self.splits), 1)
        bad = np.nonzero((counts[:, 0] < 3) | (counts[:, 1] < 1) | (counts[:, 2] < 1))[0]
        if len(bad):
            raise PreconditionError(f"{len(bad)} users violate the 3/1/1 split minimum, e.g. {bad[:10].tolist()}")


def _check_duplicates(users, items, splits, num_items, dedupe):
    key = (splits.astype(np.int64) * (users.max(initial=0) + 1) + users) * num_items + items
    _, first, counts = np.unique(key, return_index=True, return_counts=True)
    if (counts > 1).any():
        if not dedupe:
            dup = first[counts > 1][0]
            raise DataError(f"duplicate (user, item) pair within a split at record {dup}: "
                            f"user={users[dup]} item={items[dup]}")
        keep = np.sort(first)
        return users[keep], items[keep], splits[keep]
    return users, items, splits


def load_interactions(path, format_spec=None):
    """Read a UTF-8 TSV with header ``user<TAB>item[<TAB>split]``.

    Columns other than user/item/split are ignored. Split labels are 0/1/2 for
    train/valid/test; files without a split column load as all-train.
    """
    fmt = format_spec or InteractionFormat()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, missing header", line=1) from None
        header = [h.strip() for h in header]
        if "user" not in header or "item" not in header:
            raise ParseError(f"header must name 'user' and 'item' columns, got {header}", line=1)
        cu, ci = header.index("user"), header.index("item")
        cs = header.index("split") if "split" in header else None
        width = max(cu, ci, cs if cs is not None else 0) + 1

        user_map, item_map = {}, {}
        users, items, splits = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < width:
                raise ParseError(f"expected at least {width} columns, got {len(row)}", line=lineno)
            u_raw, i_raw = row[cu].strip(), row[ci].strip()
            if not u_raw or not i_raw:
                raise ParseError("empty user or item field", line=lineno)
            if cs is None:
                label = Split.TRAIN
            else:
                s_raw = row[cs].strip()
                if s_raw not in ("0", "1", "2"):
                    raise FormatError(f"line {lineno}: split label {s_raw!r} not in {{0,1,2}}")
                label = int(s_raw)
            if fmt.dense_ids:
                try:
                    u, i = int(u_raw), int(i_raw)
                except ValueError:
                    raise ParseError(f"non-integer id ({u_raw!r}, {i_raw!r}) with dense_ids", line=lineno) from None
                if u < 0 or (fmt.num_users is not None and u >= fmt.num_users):
                    raise DataError(f"line {lineno}: user index {u} out of range")
                if i < 0 or (fmt.num_items is not None and i >= fmt.num_items):
                    raise DataError(f"line {lineno}: item index {i} >= num_items={fmt.num_items}")
            else:
                u = user_map.setdefault(u_raw, len(user_map))
                i = item_map.setdefault(i_raw, len(item_map))
            users.append(u)
            items.append(i)
            splits.append(label)

    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    splits = np.asarray(splits, dtype=np.int8)
    if fmt.dense_ids:
        num_users = fmt.num_users if fmt.num_users is not None else int(users.max(initial=-1)) + 1
        num_items = fmt.num_items if fmt.num_items is not None else int(items.max(initial=-1)) + 1
        user_ids = item_ids = None
    else:
        num_users, num_items = len(user_map), len(item_map)
        if fmt.num_items is not None and num_items > fmt.num_items:
            raise DataError(f"{num_items} distinct items exceed num_items={fmt.num_items}")
        if fmt.num_items is not None:
            num_items = fmt.num_items
        user_ids = list(user_map)
        item_ids = list(item_map) + [f"<pad{k}>" for k in range(num_items - len(item_map))]
    if len(users):
        users, items, splits = _check_duplicates(users, items, splits, max(num_items, 1), fmt.dedupe)
    return Dataset(num_users, num_items, users, items, splits, user_ids or [], item_ids or [])


def write_interactions(dataset, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("user\titem\tsplit\n")
        for u, i, s in zip(dataset.users, dataset.items, dataset.splits):
            fh.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\t{int(s)}\n")


def load_mmrec_dataset(root, name):
    """Load a benchmark in the layout used by the public multimodal-rec toolkits.

    Expects ``<root>/<name>.inter`` (TSV with ``userID``, ``itemID``, ``x_label``
    columns and dense integer ids) plus ``image_feat.npy`` / ``text_feat.npy``
    whose rows align with item ids. Returns ``(dataset, {"visual": fm, "textual": fm})``.
    """
    inter = os.path.join(root, f"{name}.inter")
    if not os.path.exists(inter):
        raise DataError(f"missing interaction file {inter}")
    with open(inter, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        cols = {h: k for k, h in enumerate(header)}
        try:
            cu, ci, cs = cols["userID"], cols["itemID"], cols["x_label"]
        except KeyError as exc:
            raise FormatError(f"{inter}: missing column {exc}") from None
        raw = np.loadtxt(fh, delimiter="\t", usecols=(cu, ci, cs), dtype=np.int64, ndmin=2)
    features = {}
    for modality, fname in (("visual", "image_feat.npy"), ("textual", "text_feat.npy")):
        fpath = os.path.join(root, fname)
        if os.path.exists(fpath):
            features[modality] = FeatureMatrix(modality, np.load(fpath).astype(np.float32))
    num_items = max(int(raw[:, 1].max()) + 1, *(f.rows for f in features.values()))
    num_users = int(raw[:, 0].max()) + 1
    ds = Dataset(num_users, num_items, raw[:, 0], raw[:, 1], raw[:, 2])
    return ds, features


def subsample_users(dataset, n_users, seed):
    """Keep ``n_users`` random users (re-indexed densely) and all items."""
    rng = np.random.default_rng(seed)
    present = np.unique(dataset.users)
    if n_users > len(present):
        raise PreconditionError(f"cannot sample {n_users} users from {len(present)}")
    chosen = np.sort(rng.choice(present, size=n_users, replace=False))
    remap = -np.ones(dataset.num_users, dtype=np.int64)
    remap[chosen] = np.arange(n_users)
    keep = remap[dataset.users] >= 0
    return Dataset(n_users, dataset.num_items, remap[dataset.users[keep]], dataset.items[keep],
                   dataset.splits[keep], [dataset.user_ids[u] for u in chosen], list(dataset.item_ids))


def _split_counts(n, ratios):
    n_valid = max(1, math.floor(ratios[1] * n + 1e-9))
    n_test = max(1, math.floor(ratios[2] * n + 1e-9))
    return n - n_valid - n_test, n_valid, n_test


def split_random(dataset, ratios=(0.8, 0.1, 0.1), seed=0):
    """Per-user random train/valid/test partition.

    Each user with ``n`` interactions gets ``max(1, floor(r_valid*n))`` valid and
    ``max(1, floor(r_test*n))`` test records; the remainder goes to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise PreconditionError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    counts = np.bincount(dataset.users, minlength=dataset.num_users)
    bad = np.nonzero((counts > 0) & (counts < 5))[0]
    if len(bad):
        raise PreconditionError(
            f"users with fewer than 5 interactions: {[dataset.user_ids[u] for u in bad]}")
    rng = np.random.default_rng(seed)
    order = np.argsort(dataset.users, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    splits = np.empty(len(dataset), dtype=np.int8)
    for u in range(dataset.num_users):
        idx = order[bounds[u]:bounds[u + 1]]
        if not len(idx):
            continue
        n_train, n_valid, _ = _split_counts(len(idx), ratios)
        perm = idx[rng.permutation(len(idx))]
        splits[perm[:n_train]] = Split.TRAIN
        splits[perm[n_train:n_train + n_valid]] = Split.VALID
        splits[perm[n_train + n_valid:]] = Split.TEST
    return dataset.with_splits(splits)


@dataclass
class ColdStartSplit:
    dataset: Dataset
    valid_items: np.ndarray
    test_items: np.ndarray

    @property
    def train_items(self):
        held = np.union1d(self.valid_items, self.test_items)
        return np.setdiff1d(np.arange(self.dataset.num_items), held)


def split_cold_start(dataset, holdout_fraction=0.20, seed=0):
    """Hold out whole items: half of the held-out items go to valid, half to test.

    Every interaction is labelled by its item's membership.
    """
    if not 0 < holdout_fraction < 1:
        raise PreconditionError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    rng = np.random.default_rng(seed)
    n_hold = int(round(holdout_fraction * dataset.num_items))
    perm = rng.permutation(dataset.num_items)
    n_valid = n_hold // 2
    valid_items = np.sort(perm[:n_valid])
    test_items = np.sort(perm[n_valid:n_hold])
    label = np.full(dataset.num_items, Split.TRAIN, dtype=np.int8)
    label[valid_items] = Split.VALID
    label[test_items] = Split.TEST
    return ColdStartSplit(dataset.with_splits(label[dataset.items]), valid_items, test_items)


@dataclass
class FeatureMatrix:
    modality_id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise FormatError(f"feature matrix must be 2-D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DataError(f"feature matrix {self.modality_id!r} contains NaN/Inf")

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def tag_hash(self):
        return container.tag_hash(self.modality_id)

    @property
    def checksum(self):
        return zlib.crc32(self.values.astype("<f4").tobytes()) & 0xFFFFFFFF

    def check_items(self, num_items):
        if self.rows != num_items:
            raise DimensionError(
                f"feature matrix {self.modality_id!r} has {self.rows} rows, dataset has {num_items} items")


def store_features(matrix, path):
    with open(path, "wb") as fh:
        return container.write_dense(fh, matrix.values, matrix.modality_id)


def load_features(path, modality_id=None):
    """Load one ``FMX1`` feature file.

    If ``modality_id`` is given the stored tag hash must match it; otherwise the
    file stem is used as the modality id.
    """
    with open(path, "rb") as fh:
        rec = container.read_dense(fh)
        if rec is None:
            raise FormatError(f"{path}: empty feature file")
        values, thash, _ = rec
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after feature record")
    if modality_id is None:
        modality_id = os.path.splitext(os.path.basename(path))[0]
    elif thash != container.tag_hash(modality_id):
        raise FormatError(f"{path}: tag hash does not match modality {modality_id!r}")
    return FeatureMatrix(modality_id, values)
