"""Diagnostics: weight histograms, gradient-conflict probe, reliability recovery, ablation tables."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .losses import reliability_signal
from .model import STAGE_II, ModelParams, modality_weights, score_triplets


@dataclass
class Histogram:
    modality_id: int
    edges: np.ndarray
    counts: np.ndarray

    def to_tsv(self) -> str:
        lines = ["modality\tbin_lo\tbin_hi\tcount"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{self.modality_id}\t{lo:.6g}\t{hi:.6g}\t{int(c)}")
        return "\n".join(lines) + "\n"


def weight_histogram(params: ModelParams, modality_id: int, bins: int = 10) -> Histogram:
    if bins < 2:
        raise ValueError("need at least two bins")
    w = modality_weights(params)[:, modality_id]
    counts, edges = np.histogram(w, bins=bins, range=(0.0, 1.0))
    return Histogram(modality_id, edges, counts)


@dataclass
class ProbeResult:
    """Gradient inner products of the ranking and calibration losses.

    ``inner_product`` differentiates w.r.t. the positive item's weight vector
    only, holding everything else fixed; ``full_inner_product`` also keeps the
    negative-item paths; ``logit_inner_product`` is the same as the full one
    but w.r.t. the logits that training actually updates.
    """
    inner_product: float
    violation: bool
    precondition_held: bool
    full_inner_product: float = 0.0
    logit_inner_product: float = 0.0
    rec_grad: np.ndarray = field(default=None, repr=False)
    cal_grad: np.ndarray = field(default=None, repr=False)


def conflict_probe(batch, params: ModelParams, features, hyper) -> ProbeResult:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    s = score_triplets(params, features, batch, STAGE_II)
    sig = reliability_signal(s, hyper.tau)
    slack = expit(-(s.pos_score - s.neg_score))  # 1 - sigmoid(margin)
    q = s.pos_weights + s.neg_weights
    rec_pos = -s.pos_modal * slack[:, None]
    cal_pos = -sig.gamma[:, None] * sig.z / q
    n_items, n_mod = params.item_count, params.n_modalities

    g_rec = np.zeros((n_items, n_mod))
    g_cal = np.zeros((n_items, n_mod))
    np.add.at(g_rec, s.pos, rec_pos)
    np.add.at(g_cal, s.pos, cal_pos)
    inner = float(np.sum(g_rec * g_cal))

    full_rec, full_cal = g_rec.copy(), g_cal.copy()
    np.add.at(full_rec, s.neg, s.neg_modal * slack[:, None])
    np.add.at(full_cal, s.neg, cal_pos)
    full_inner = float(np.sum(full_rec * full_cal))

    w = modality_weights(params)

    def to_logits(g):
        return w * (g - np.sum(w * g, axis=1, keepdims=True))

    logit_inner = float(np.sum(to_logits(full_rec) * to_logits(full_cal)))
    return ProbeResult(inner, inner < 0, bool(np.all(s.pos_modal >= 0)), full_inner, logit_inner, g_rec, g_cal)


@dataclass
class RecoveryScore:
    mean_w_corrupted: float
    mean_w_clean: float
    auc: float


def detection_auc(scores, labels) -> float:
    """ROC AUC via the rank-sum statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def reliability_recovery_score(params: ModelParams, corrupted, corrupted_modality: int) -> RecoveryScore:
    """How well the learned weights single out items whose modality is corrupted.

    ``corrupted`` is a boolean flag per item or a collection of item indices.
    """
    corrupted = np.asarray(corrupted)
    if corrupted.dtype != bool:
        flags = np.zeros(params.item_count, dtype=bool)
        flags[corrupted.astype(np.int64)] = True
        corrupted = flags
    w = modality_weights(params)[:, corrupted_modality]
    mean_bad = float(w[corrupted].mean()) if corrupted.any() else float("nan")
    mean_good = float(w[~corrupted].mean()) if (~corrupted).any() else float("nan")
    return RecoveryScore(mean_bad, mean_good, detection_auc(1.0 - w, corrupted))


@dataclass
class ComparisonTable:
    k_list: tuple
    names: list
    rows: list  # per variant: {"recall": {k: v}, "ndcg": {k: v}}
    improvement: dict  # (metric, k) -> relative improvement of the reference over the best other

    def columns(self):
        return [(metric, k) for metric in ("recall", "ndcg") for k in self.k_list]

    def to_tsv(self) -> str:
        cols = self.columns()
        lines = ["variant\t" + "\t".join(f"{m}@{k}" for m, k in cols)]
        for name, row in zip(self.names, self.rows):
            lines.append(name + "\t" + "\t".join(f"{row[m][k]:.6f}" for m, k in cols))
        lines.append("impro.\t" + "\t".join(f"{100 * self.improvement[c]:.2f}%" for c in cols))
        return "\n".join(lines) + "\n"


def relative_improvement(a: float, b: float) -> float:
    return (a - b) / b if b != 0 else float("nan")


def compare_variants(reports: dict, reference: str | None = None) -> ComparisonTable:
    """Align per-variant reports; ``reports`` maps name -> EvalReport."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = list(reports)
    k_list = tuple(reports[names[0]].k_list)
    for n in names:
        if tuple(reports[n].k_list) != k_list:
            raise ValueError(f"K list of {n!r} differs from {names[0]!r}")
    reference = reference or names[0]
    rows = [{"recall": dict(reports[n].recall), "ndcg": dict(reports[n].ndcg)} for n in names]
    improvement = {}
    for metric in ("recall", "ndcg"):
        for k in k_list:
            ref = getattr(reports[reference], metric)[k]
            best_other = max(getattr(reports[n], metric)[k] for n in names if n != reference)
            improvement[(metric, k)] = relative_improvement(ref, best_other)
    return ComparisonTable(k_list, names, rows, improvement)
