"""Synthetic multimodal datasets with a planted unreliable modality."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, ModalityFeatureTable, build_dataset


@dataclass(frozen=True)
class SyntheticSpec:
    user_count: int = 300
    item_count: int = 200
    latent_dim: int = 8
    modality_dims: tuple = (32, 32)
    interactions_per_user: int = 20
    corrupted_modality: int = 1
    corruption_fraction: float = 0.4
    noise_scale: float = 0.1
    feature_noise: float = 0.05
    temperature: float = 1.0
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.corruption_fraction <= 1.0:
            raise ValueError("corruption_fraction must lie in [0, 1]")
        if min(self.user_count, self.item_count, self.latent_dim, self.interactions_per_user) < 1:
            raise ValueError("all counts must be >= 1")
        if len(self.modality_dims) < 2 or min(self.modality_dims) < 1:
            raise ValueError("need at least two modalities with positive dims")
        if not 0 <= self.corrupted_modality < len(self.modality_dims):
            raise ValueError("corrupted_modality out of range")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if self.interactions_per_user >= self.item_count:
            raise ValueError("interactions_per_user must be smaller than item_count")


@dataclass(frozen=True)
class GroundTruth:
    corrupted_items: np.ndarray  # sorted item indices
    user_factors: np.ndarray = field(repr=False)
    item_factors: np.ndarray = field(repr=False)
    corrupted_modality: int = 1

    def corruption_flags(self, item_count: int) -> np.ndarray:
        flags = np.zeros(item_count, dtype=bool)
        flags[self.corrupted_items] = True
        return flags


def _sample_without_replacement(rng, logits, k):
    # Gumbel top-k == sequential sampling from softmax without replacement
    g = logits - np.log(-np.log(rng.random(logits.shape)))
    return np.argsort(-g, kind="stable")[:k]


def generate(spec: SyntheticSpec):
    """Return ``(dataset, feature_tables, ground_truth)`` for ``spec``.

    Users pick items from a softmax over latent dot products. Each modality
    observes the item latent through its own fixed random linear map plus a
    little noise; corrupted rows of the chosen modality are pure noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_u, n_i, r = spec.user_count, spec.item_count, spec.latent_dim
    user_f = rng.standard_normal((n_u, r))
    item_f = rng.standard_normal((n_i, r))

    logits = user_f @ item_f.T / (spec.temperature * np.sqrt(r))
    pairs = []
    for u in range(n_u):
        for i in _sample_without_replacement(rng, logits[u], spec.interactions_per_user):
            pairs.append((f"u{u}", f"i{i}"))
    ds = build_dataset(pairs, user_ids=[f"u{u}" for u in range(n_u)],
                       item_ids=[f"i{i}" for i in range(n_i)])

    tables = []
    for m, dim in enumerate(spec.modality_dims):
        expand = rng.standard_normal((r, dim)) / np.sqrt(r)
        feats = item_f @ expand + spec.feature_noise * rng.standard_normal((n_i, dim))
        tables.append(feats)

    n_bad = int(round(spec.corruption_fraction * n_i))
    bad = np.sort(rng.permutation(n_i)[:n_bad])
    cm = spec.corrupted_modality
    tables[cm][bad] = spec.noise_scale * rng.standard_normal((n_bad, spec.modality_dims[cm]))

    feature_tables = [ModalityFeatureTable(m, t) for m, t in enumerate(tables)]
    truth = GroundTruth(bad, user_f, item_f, cm)
    return ds, feature_tables, truth


def write_ground_truth(path, truth: GroundTruth, ds: InteractionDataset):
    flags = truth.corruption_flags(ds.item_count)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for raw, flag in zip(ds.item_ids, flags):
            fh.write(f"{raw}\t{int(flag)}\n")


def read_ground_truth(path, ds: InteractionDataset) -> np.ndarray:
    """Corruption flags per dense item index."""
    index = ds.item_index
    flags = np.zeros(ds.item_count, dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw, flag = line.rstrip("\n").split("\t")
                if raw in index:
                    flags[index[raw]] = flag.strip() == "1"
    return flags
