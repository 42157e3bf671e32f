"""Full-catalog top-K evaluation (Recall@K, NDCG@K)."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import TEST, TRAIN, VAL, InteractionDataset
from .model import STAGE_II, score_users

# scoring blocks are fixed-size so results never depend on the worker count
USER_BLOCK = 256


@dataclass
class EvalReport:
    split: str
    k_list: tuple
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    users_evaluated: int = 0

    def to_tsv(self) -> str:
        lines = ["split\tk\trecall\tndcg\tusers"]
        for k in self.k_list:
            lines.append(f"{self.split}\t{k}\t{self.recall[k]:.6f}\t{self.ndcg[k]:.6f}\t{self.users_evaluated}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        head = f"{'K':>4}  {'Recall':>8}  {'NDCG':>8}"
        rows = [f"{k:>4}  {self.recall[k]:8.4f}  {self.ndcg[k]:8.4f}" for k in self.k_list]
        return f"[{self.split}] users={self.users_evaluated}\n" + "\n".join([head] + rows)


def rank_scores(scores, exclude=(), top=None) -> np.ndarray:
    """Item indices by descending score, ties by ascending index, excluded items dropped."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64)] = False
    cand = np.flatnonzero(keep)
    order = cand[np.lexsort((cand, -scores[cand]))]
    return order if top is None else order[:top]


def rank_items(params, features, u, exclude=(), stage=STAGE_II, top=None) -> np.ndarray:
    return rank_scores(score_users(params, features, [u], stage)[0], exclude, top)


def recall_at_k(ranked, relevant, k) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for it in ranked[:k] if int(it) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(1.0 / np.log2(r + 2) for r, it in enumerate(ranked[:k]) if int(it) in relevant)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(len(relevant), k)))
    return float(dcg / idcg)


def _eval_block(score_fn, users, relevant, excluded, k_list):
    scores = score_fn(users)
    kmax = max(k_list)
    out = []
    for row, u in enumerate(users):
        ranked = rank_scores(scores[row], excluded[u], top=kmax)
        out.append([(recall_at_k(ranked, relevant[u], k), ndcg_at_k(ranked, relevant[u], k)) for k in k_list])
    return out


def evaluate_scores(score_fn, dataset: InteractionDataset, split="val", k_list=(10, 20), workers=1) -> EvalReport:
    """Evaluate an arbitrary ``score_fn(users) -> (len(users), items)`` scorer."""
    if split not in ("val", "test"):
        raise ValueError("split must be 'val' or 'test'")
    k_list = tuple(int(k) for k in k_list)
    tag = VAL if split == "val" else TEST
    seen = [TRAIN] if split == "val" else [TRAIN, VAL]
    relevant = dataset.positives(tag)
    excl_lists = [dataset.positives(t) for t in seen]
    excluded = [np.concatenate([e[u] for e in excl_lists]) for u in range(dataset.user_count)]
    users = np.array([u for u in range(dataset.user_count) if len(relevant[u])], dtype=np.int64)
    blocks = [users[s:s + USER_BLOCK] for s in range(0, len(users), USER_BLOCK)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda b: _eval_block(score_fn, b, relevant, excluded, k_list), blocks))
    else:
        results = [_eval_block(score_fn, b, relevant, excluded, k_list) for b in blocks]
    per_user = np.array([r for block in results for r in block]).reshape(len(users), len(k_list), 2)
    report = EvalReport(split, k_list, users_evaluated=len(users))
    for j, k in enumerate(k_list):
        report.recall[k] = float(np.mean(per_user[:, j, 0])) if len(users) else 0.0
        report.ndcg[k] = float(np.mean(per_user[:, j, 1])) if len(users) else 0.0
    return report


def evaluate(params, features, dataset: InteractionDataset, split="val", k_list=(10, 20), stage=STAGE_II,
             workers=1) -> EvalReport:
    return evaluate_scores(lambda users: score_users(params, features, users, stage), dataset, split,
                           k_list, workers)
