"""Closed-form gradients for both training stages, Adam, and a finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .losses import LOG_FLOOR, Hyperparams, bpr_loss, calibration_loss, reliability_signal
from .model import STAGE_I, STAGE_II, ModelParams, score_triplets


class NumericalError(ArithmeticError):
    pass


@dataclass
class BackwardResult:
    loss: float
    grads: ModelParams
    rec: np.ndarray  # per-triplet BPR
    cal: np.ndarray  # per-triplet calibration (zeros in stage I)
    gamma: np.ndarray


def backward(batch, params: ModelParams, features, stage, hyper: Hyperparams, nograd: bool = True,
             with_details: bool = False):
    """Loss and exact gradients of the stage objective.

    With ``nograd`` (the default) the reliability vector and confidence are
    constants; otherwise their tanh/softmax paths are differentiated too.
    Returns ``(loss, grads)``, or a :class:`BackwardResult` when
    ``with_details`` is set.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    s = score_triplets(params, features, batch, stage)
    n_mod = params.n_modalities
    margin = s.pos_score - s.neg_score
    rec = bpr_loss(s.pos_score, s.neg_score)
    g_margin = -expit(-margin)  # d softplus(-x) / dx

    cal = np.zeros_like(rec)
    gamma = np.zeros_like(rec)
    g_q = None
    g_diff = None
    if stage == STAGE_II:
        sig = reliability_signal(s, hyper.tau)
        gamma = sig.gamma
        q = s.pos_weights + s.neg_weights
        if hyper.normalize_joint_weights:
            q = q / 2.0
        cal = calibration_loss(gamma, sig.z, s.pos_weights, s.neg_weights, hyper.normalize_joint_weights)
        if hyper.alpha > 0:
            # d/dw of -gamma * z * log(w_i + w_k); the 1/2 of the normalized form cancels
            g_q = -hyper.alpha * gamma[:, None] * sig.z / (s.pos_weights + s.neg_weights)
            if not nograd:
                kl = np.sum(sig.z * (np.log(np.maximum(sig.z, LOG_FLOOR)) - np.log(q)), axis=1)
                dgamma = np.where(margin > 0, (1.0 - gamma ** 2) / hyper.tau, 0.0)
                g_margin = g_margin + hyper.alpha * kl * dgamma
                g_z = hyper.alpha * gamma[:, None] * (
                    np.log(np.maximum(sig.z, LOG_FLOOR)) + (sig.z >= LOG_FLOOR) - np.log(q))
                g_h = sig.z * (g_z - np.sum(sig.z * g_z, axis=1, keepdims=True))
                g_diff = np.where(sig.diff >= 0, g_h, 0.0)

    g_ymi = g_margin[:, None] * s.pos_weights
    g_ymk = -g_margin[:, None] * s.neg_weights
    if g_diff is not None:
        g_ymi = g_ymi + g_diff
        g_ymk = g_ymk - g_diff

    total = float(np.sum(rec) + (hyper.alpha * np.sum(cal) if stage == STAGE_II else 0.0))
    norm = params.theta_norm()
    total += hyper.beta * norm
    if not np.isfinite(total):
        per = rec + hyper.alpha * cal
        bad = int(np.flatnonzero(~np.isfinite(per))[0]) if np.any(~np.isfinite(per)) else 0
        u, i, k = batch[bad]
        raise NumericalError(f"non-finite loss at triplet #{bad} (user={u}, pos={i}, neg={k})")

    grads = params.zeros_like()
    u, i, k = s.users, s.pos, s.neg
    for m in range(n_mod):
        f = features[m]
        f = getattr(f, "matrix", f)
        ci, ck = g_ymi[:, m], g_ymk[:, m]
        eu = s.e_user[m]
        np.add.at(grads.user_emb[m], u, ci[:, None] * s.e_pos[m] + ck[:, None] * s.e_neg[m])
        grads.proj[m] += (ci[:, None] * eu).T @ f[i] + (ck[:, None] * eu).T @ f[k]
        grads.bias[m] += np.sum((ci + ck)[:, None] * eu, axis=0)
    if stage == STAGE_II:
        g_wi = g_margin[:, None] * s.pos_modal
        g_wk = -g_margin[:, None] * s.neg_modal
        if g_q is not None:
            g_wi = g_wi + g_q
            g_wk = g_wk + g_q
        for rows, w, gw in ((i, s.pos_weights, g_wi), (k, s.neg_weights, g_wk)):
            g_logit = w * (gw - np.sum(w * gw, axis=1, keepdims=True))
            np.add.at(grads.logits, rows, g_logit)
    if hyper.beta > 0 and norm > 0:
        for g, p in zip(grads.theta(), params.theta()):
            g += hyper.beta * p / norm

    if with_details:
        return BackwardResult(total, grads, rec, cal, gamma)
    return total, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        arrays = params.arrays() if isinstance(params, ModelParams) else list(params)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state: AdamState, lr: float, frozen=()):
    """In-place Adam update with bias correction.

    ``frozen`` holds positions (in ``arrays()`` order) that are left untouched
    together with their moments.
    """
    p_arrays = params.arrays() if isinstance(params, ModelParams) else list(params)
    g_arrays = grads.arrays() if isinstance(grads, ModelParams) else list(grads)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for idx, (p, g, m, v) in enumerate(zip(p_arrays, g_arrays, state.m, state.v)):
        if idx in frozen:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def finite_diff_check(loss_fn, params, h: float = 1e-5, sample_count: int = 200, seed: int = 0,
                      grads=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns a float or ``(float, grads)``; the analytic
    gradient is taken from ``grads`` if given, else from ``loss_fn``.
    Coordinates are sampled uniformly over all entries of all arrays.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    p_arrays = params.arrays() if isinstance(params, ModelParams) else list(params)

    def value(p):
        out = loss_fn(p)
        return out[0] if isinstance(out, tuple) else out

    if grads is None:
        out = loss_fn(params)
        if not isinstance(out, tuple):
            raise ValueError("loss_fn must return (loss, grads) when grads is not given")
        grads = out[1]
    g_arrays = grads.arrays() if isinstance(grads, ModelParams) else list(grads)

    sizes = np.array([a.size for a in p_arrays])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat = rng.integers(0, offsets[-1], size=sample_count)
    worst = 0.0
    for idx in flat:
        a = int(np.searchsorted(offsets, idx, side="right") - 1)
        pos = np.unravel_index(int(idx - offsets[a]), p_arrays[a].shape)
        arr = p_arrays[a]
        orig = arr[pos]
        arr[pos] = orig + h
        up = value(params)
        arr[pos] = orig - h
        down = value(params)
        arr[pos] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(g_arrays[a][pos])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
