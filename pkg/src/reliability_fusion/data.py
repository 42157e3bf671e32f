"""Interaction/feature loading, per-user splitting and BPR triplet sampling."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}

FEATURE_CACHE_MAGIC = b"MRGF"
MAX_REJECTIONS = 1000


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class InteractionDataset:
    user_count: int
    item_count: int
    users: np.ndarray  # int64, one entry per interaction
    items: np.ndarray
    user_ids: tuple = ()
    item_ids: tuple = ()
    split: np.ndarray | None = None  # per-interaction tag, None until split

    @property
    def user_index(self) -> dict:
        return {raw: k for k, raw in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict:
        return {raw: k for k, raw in enumerate(self.item_ids)}

    @property
    def n_interactions(self) -> int:
        return len(self.users)

    def _require_split(self):
        if self.split is None:
            raise DataError("dataset has not been split")

    def positives(self, split: str | int = "train") -> list[np.ndarray]:
        """Sorted item indices per user for one split."""
        self._require_split()
        tag = SPLIT_NAMES[split] if isinstance(split, str) else split
        mask = self.split == tag
        return _group_items(self.users[mask], self.items[mask], self.user_count)

    @property
    def per_user_train_positives(self) -> list[np.ndarray]:
        return self.positives(TRAIN)

    def all_positives(self) -> list[np.ndarray]:
        return _group_items(self.users, self.items, self.user_count)

    def split_pairs(self, split: str | int) -> tuple[np.ndarray, np.ndarray]:
        self._require_split()
        tag = SPLIT_NAMES[split] if isinstance(split, str) else split
        mask = self.split == tag
        return self.users[mask], self.items[mask]


@dataclass(frozen=True)
class ModalityFeatureTable:
    modality_id: int
    matrix: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _group_items(users, items, user_count):
    order = np.lexsort((items, users))
    u, it = users[order], items[order]
    bounds = np.searchsorted(u, np.arange(user_count + 1))
    return [it[bounds[k]:bounds[k + 1]] for k in range(user_count)]


def _reindex(raw_values):
    index = {}
    for raw in raw_values:
        if raw not in index:
            index[raw] = len(index)
    return index


def build_dataset(pairs, user_ids=None, item_ids=None) -> InteractionDataset:
    """Build an unsplit dataset from raw (user, item) pairs.

    Index assignment follows first appearance; repeated pairs collapse.
    """
    seen = set()
    unique = []
    for p in pairs:
        if p not in seen:
            seen.add(p)
            unique.append(p)
    if not unique:
        raise DataError("no interactions")
    uidx = _reindex(user_ids if user_ids is not None else (p[0] for p in unique))
    iidx = _reindex(item_ids if item_ids is not None else (p[1] for p in unique))
    users = np.fromiter((uidx[p[0]] for p in unique), dtype=np.int64, count=len(unique))
    items = np.fromiter((iidx[p[1]] for p in unique), dtype=np.int64, count=len(unique))
    return InteractionDataset(
        user_count=len(uidx), item_count=len(iidx), users=users, items=items,
        user_ids=tuple(uidx), item_ids=tuple(iidx),
    )


def load_interactions(path) -> InteractionDataset:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}: line {lineno}: expected 'user<TAB>item', got {line!r}")
            pairs.append((parts[0], parts[1]))
    if not pairs:
        raise DataError(f"{path}: empty interactions file")
    return build_dataset(pairs)


def load_modality_features(path, modality_id: int, dataset: InteractionDataset) -> ModalityFeatureTable:
    """Read ``item<TAB>v1,...,vd`` rows and order them by dense item index."""
    index = dataset.item_index
    rows: dict[int, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected 'item<TAB>values'")
            try:
                vec = np.array([float(v) for v in parts[1].split(",")], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(f"{path}: line {lineno}: dimension {len(vec)} != {dim}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}: line {lineno}: non-finite feature value")
            k = index.get(parts[0])
            if k is not None:
                rows[k] = vec
    if dim is None:
        raise DataError(f"{path}: empty feature file")
    missing = [raw for k, raw in enumerate(dataset.item_ids) if k not in rows]
    if missing:
        raise DataError(f"{path}: incomplete modality {modality_id}: no features for item {missing[0]!r}")
    matrix = np.stack([rows[k] for k in range(dataset.item_count)])
    return ModalityFeatureTable(modality_id, matrix)


def write_interactions(path, dataset: InteractionDataset):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in zip(dataset.users, dataset.items):
            fh.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\n")


def write_modality_features(path, table: ModalityFeatureTable, item_ids):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for raw, row in zip(item_ids, table.matrix):
            fh.write(raw + "\t" + ",".join(repr(float(v)) for v in row) + "\n")


def write_feature_cache(path, table: ModalityFeatureTable):
    n, d = table.matrix.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_CACHE_MAGIC + struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(table.matrix, dtype="<f4").tobytes())


def read_feature_cache(path, modality_id: int) -> ModalityFeatureTable:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_CACHE_MAGIC:
        raise DataError(f"{path}: not a feature cache")
    n, d = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * n * d:
        raise DataError(f"{path}: truncated feature cache")
    mat = np.frombuffer(buf, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)
    return ModalityFeatureTable(modality_id, mat)


def _split_counts(n, ratios):
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    # train must keep at least one interaction; drop test first, then val
    while n - n_val - n_test < 1:
        if n_test > 0:
            n_test -= 1
        else:
            n_val -= 1
    return n - n_val - n_test, n_val, n_test


def split_dataset(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionDataset:
    """Per-user random split; every user keeps at least one training interaction."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    tags = np.empty(ds.n_interactions, dtype=np.int8)
    order = np.argsort(ds.users, kind="stable")
    bounds = np.searchsorted(ds.users[order], np.arange(ds.user_count + 1))
    for u in range(ds.user_count):
        idx = order[bounds[u]:bounds[u + 1]]
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, _ = _split_counts(len(idx), ratios)
        tags[idx[:n_train]] = TRAIN
        tags[idx[n_train:n_train + n_val]] = VAL
        tags[idx[n_train + n_val:]] = TEST
    return replace(ds, split=tags)


class NegativeSampler:
    """Uniform rejection sampler over items a user never interacted with."""

    def __init__(self, ds: InteractionDataset):
        self.item_count = ds.item_count
        counts = np.bincount(ds.users, minlength=ds.user_count)
        full = np.flatnonzero(counts >= ds.item_count)
        if len(full):
            raise DataError(f"user {ds.user_ids[full[0]]!r} interacted with every item; no negatives")
        self._keys = np.unique(ds.users * ds.item_count + ds.items)

    def is_positive(self, users, items):
        keys = users * self.item_count + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def sample(self, users, rng):
        neg = rng.integers(0, self.item_count, size=len(users))
        bad = np.flatnonzero(self.is_positive(users, neg))
        for _ in range(MAX_REJECTIONS):
            if len(bad) == 0:
                return neg
            neg[bad] = rng.integers(0, self.item_count, size=len(bad))
            bad = bad[self.is_positive(users[bad], neg[bad])]
        if len(bad):
            raise DataError(f"negative sampling exceeded {MAX_REJECTIONS} rejections")
        return neg


def sample_triplets(ds: InteractionDataset, count: int | None = None, seed: int = 0,
                    sampler: NegativeSampler | None = None) -> np.ndarray:
    """Draw ``count`` (user, pos, neg) triplets as an int64 array of shape (count, 3).

    Training interactions are visited in shuffled passes, so ``count`` equal to
    the number of training interactions uses each one exactly once.
    """
    users, items = ds.split_pairs(TRAIN)
    n = len(users)
    if count is None:
        count = n
    sampler = sampler or NegativeSampler(ds)
    rng = np.random.default_rng(seed)
    picks = np.concatenate([rng.permutation(n) for _ in range(-(-count // n))])[:count] if count else np.empty(0, np.int64)
    u, i = users[picks], items[picks]
    k = sampler.sample(u, rng)
    return np.stack([u, i, k], axis=1)
