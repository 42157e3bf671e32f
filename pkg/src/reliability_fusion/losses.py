"""Ranking loss, reliability signals and the weight-calibration loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import STAGE_I, STAGE_II, ModelParams, TripletScores, score_triplets, softmax

NEG_FILL = -float(np.exp(6.0))  # g-mapping target for negative differences
LOG_FLOOR = 1e-300
BELOW_ONE = float(np.nextafter(1.0, 0.0))  # tanh saturates to 1.0 in float64 near margin/tau ~ 19

VARIANTS = ("full", "no_weight", "no_cal", "no_two_stage", "no_nograd")


@dataclass
class Hyperparams:
    alpha: float = 0.1
    beta: float = 0.01
    tau: float = 1.0
    embed_dim: int = 64
    batch_size: int = 2048
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-4
    k_list: tuple = (10, 20)
    seed: int = 0
    variant: str = "full"
    normalize_joint_weights: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0 or self.lr <= 0:
            raise ValueError("invalid training hyperparameters")
        self.k_list = tuple(int(k) for k in self.k_list)


@dataclass
class ReliabilitySignal:
    """Per-triplet supervision; treated as constants by the default gradient path."""
    diff: np.ndarray  # (B, M)
    z: np.ndarray  # (B, M)
    gamma: np.ndarray  # (B,)


def bpr_loss(y_ui, y_uk):
    # -log sigmoid(x) == softplus(-x)
    return np.logaddexp(0.0, -(np.asarray(y_ui, dtype=np.float64) - y_uk))


def difference_vector(scores: TripletScores) -> np.ndarray:
    return scores.pos_modal - scores.neg_modal


def g_map(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, NEG_FILL)


def reliability_vector(diff) -> np.ndarray:
    return softmax(g_map(diff), axis=-1)


def confidence(y_ui, y_uk, tau):
    if tau <= 0:
        raise ValueError("tau must be positive")
    margin = np.asarray(y_ui, dtype=np.float64) - y_uk
    return np.where(margin > 0, np.minimum(np.tanh(np.maximum(margin, 0.0) / tau), BELOW_ONE), 0.0)


def reliability_signal(scores: TripletScores, tau: float) -> ReliabilitySignal:
    diff = difference_vector(scores)
    return ReliabilitySignal(diff, reliability_vector(diff), confidence(scores.pos_score, scores.neg_score, tau))


def calibration_loss(gamma, z, w_i, w_k, normalize_joint_weights=False):
    """gamma * KL(z || w_i + w_k), elementwise over a leading batch axis if present.

    The joint weight vector sums to 2 unless ``normalize_joint_weights``, so
    values below zero are expected.
    """
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(w_i) + np.asarray(w_k)
    if normalize_joint_weights:
        q = q / 2.0
    kl = np.sum(z * (np.log(np.maximum(z, LOG_FLOOR)) - np.log(q)), axis=-1)
    return np.asarray(gamma) * kl


def regularizer(params: ModelParams) -> float:
    return params.theta_norm()


def stage1_loss(batch, params: ModelParams, features, beta: float) -> float:
    s = score_triplets(params, features, batch, STAGE_I)
    return float(np.sum(bpr_loss(s.pos_score, s.neg_score)) + beta * regularizer(params))


def stage2_parts(batch, params: ModelParams, features, tau: float, normalize_joint_weights=False):
    """(scores, signal, per-triplet BPR, per-triplet calibration) under weighted fusion."""
    s = score_triplets(params, features, batch, STAGE_II)
    sig = reliability_signal(s, tau)
    rec = bpr_loss(s.pos_score, s.neg_score)
    cal = calibration_loss(sig.gamma, sig.z, s.pos_weights, s.neg_weights, normalize_joint_weights)
    return s, sig, rec, cal


def stage2_loss(batch, params: ModelParams, features, alpha: float, beta: float, tau: float,
                normalize_joint_weights=False, signal: ReliabilitySignal | None = None) -> float:
    """Stage-II objective.

    With ``signal`` given, z and gamma are taken from it instead of the
    current ratings; this is the frozen-signal view the gradients follow.
    """
    s = score_triplets(params, features, batch, STAGE_II)
    sig = signal if signal is not None else reliability_signal(s, tau)
    rec = bpr_loss(s.pos_score, s.neg_score)
    cal = calibration_loss(sig.gamma, sig.z, s.pos_weights, s.neg_weights, normalize_joint_weights)
    return float(np.sum(rec) + alpha * np.sum(cal) + beta * regularizer(params))


def stage_loss(batch, params, features, stage, hyper: Hyperparams) -> float:
    if stage == STAGE_I:
        return stage1_loss(batch, params, features, hyper.beta)
    return stage2_loss(batch, params, features, hyper.alpha, hyper.beta, hyper.tau,
                       hyper.normalize_joint_weights)
