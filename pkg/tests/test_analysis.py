import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reliability_fusion.analysis import (compare_variants, conflict_probe, detection_auc,
                                         reliability_recovery_score, relative_improvement, weight_histogram)
from reliability_fusion.losses import Hyperparams
from reliability_fusion.metrics import EvalReport
from reliability_fusion.model import init_params, score_triplets


def test_histogram_uniform_logits():
    p = init_params(2, 7, 2, 3, [2, 2])
    p.logits[:] = 0.0
    h = weight_histogram(p, 0, 10)
    assert h.counts.sum() == 7
    assert h.counts[5] == 7  # 1/M = 0.5 falls in [0.5, 0.6)
    p3 = init_params(2, 7, 3, 3, [2, 2, 2])
    p3.logits[:] = 0.0
    assert weight_histogram(p3, 1, 10).counts[3] == 7  # 1/3 in [0.3, 0.4)
    with pytest.raises(ValueError):
        weight_histogram(p, 0, 1)


def test_histogram_two_modalities_mirror():
    p = init_params(2, 500, 2, 3, [2, 2])
    p.logits = np.random.default_rng(0).normal(0, 2, (500, 2))
    h0, h1 = weight_histogram(p, 0, 10), weight_histogram(p, 1, 10)
    assert h0.counts.sum() == h1.counts.sum() == 500
    assert np.array_equal(h0.counts, h1.counts[::-1])
    assert h0.to_tsv().splitlines()[0] == "modality\tbin_lo\tbin_hi\tcount"


def probe_instance(seed, nonneg):
    rng = np.random.default_rng(seed)
    n_items, dims = 6, [3, 4]
    if nonneg:
        feats = [rng.uniform(0, 1, (n_items, d)) for d in dims]
        p = init_params(4, n_items, 2, 3, dims, seed=seed)
        p.user_emb = [rng.uniform(0, 1, (4, 3)) for _ in dims]
        p.proj = [rng.uniform(0, 1, (3, d)) for d in dims]
        p.bias = [rng.uniform(0, 1, 3) for _ in dims]
    else:
        feats = [rng.standard_normal((n_items, d)) for d in dims]
        p = init_params(4, n_items, 2, 3, dims, seed=seed, std=1.0)
    p.logits = rng.normal(0, 1, (n_items, 2))
    batch = np.array([[rng.integers(4), *rng.choice(n_items, 2, replace=False)] for _ in range(8)])
    return p, feats, batch


@pytest.mark.parametrize("seed", range(20))
def test_probe_nonnegative_under_precondition(seed):
    p, feats, batch = probe_instance(seed, nonneg=True)
    r = conflict_probe(batch, p, feats, Hyperparams(tau=0.5))
    assert r.precondition_held
    assert r.inner_product >= -1e-12 and not r.violation


def test_probe_matches_elementwise_oracle():
    p, feats, batch = probe_instance(3, nonneg=False)
    h = Hyperparams(tau=0.8)
    r = conflict_probe(batch, p, feats, h)
    s = score_triplets(p, feats, batch)
    rec = np.zeros((p.item_count, 2))
    cal = np.zeros((p.item_count, 2))
    for b, (u, i, k) in enumerate(batch):
        margin = s.pos_score[b] - s.neg_score[b]
        slack = 1 - 1 / (1 + np.exp(-margin))
        d = s.pos_modal[b] - s.neg_modal[b]
        g = np.where(d >= 0, d, -np.exp(6))
        z = np.exp(g - g.max()) / np.exp(g - g.max()).sum()
        gamma = np.tanh(margin / h.tau) if margin > 0 else 0.0
        rec[i] += -s.pos_modal[b] * slack
        cal[i] += -gamma * z / (s.pos_weights[b] + s.neg_weights[b])
    assert abs(r.inner_product - float(np.sum(rec * cal))) < 1e-12


def test_probe_zero_confidence_gives_zero():
    p, feats, batch = probe_instance(1, nonneg=False)
    s = score_triplets(p, feats, batch)
    flipped = np.array([[u, k, i] if s.pos_score[b] > s.neg_score[b] else [u, i, k]
                        for b, (u, i, k) in enumerate(batch)])
    r = conflict_probe(flipped, p, feats, Hyperparams())
    assert r.inner_product == 0.0 and np.all(r.cal_grad == 0)
    assert r.full_inner_product == 0.0 and r.logit_inner_product == 0.0


def test_auc_examples():
    flags = np.array([True, False, True, False, False])
    assert detection_auc(np.full(5, 0.5), flags) == 0.5
    assert detection_auc(flags.astype(float), flags) == 1.0
    assert np.isnan(detection_auc([0.1, 0.2], [False, False]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=30), st.integers(0, 2**31))
def test_auc_matches_pairwise_oracle(scores, seed):
    labels = np.random.default_rng(seed).random(len(scores)) < 0.5
    if labels.all() or not labels.any():
        labels[0] = not labels[0]
    s = np.array(scores)
    pos, neg = s[labels], s[~labels]
    oracle = np.mean([(a > b) + 0.5 * (a == b) for a in pos for b in neg])
    assert abs(detection_auc(s, labels) - oracle) < 1e-12


def test_recovery_score():
    p = init_params(2, 4, 2, 3, [2, 2])
    p.logits[:] = 0.0
    flags = np.array([True, False, True, False])
    r = reliability_recovery_score(p, flags, 1)
    assert r.auc == 0.5 and r.mean_w_corrupted == r.mean_w_clean == 0.5
    p.logits[:, 1] = np.where(flags, -5.0, 5.0)
    r = reliability_recovery_score(p, [0, 2], 1)
    assert r.auc == 1.0 and r.mean_w_corrupted < r.mean_w_clean


def report(r20, n20, ks=(10, 20)):
    rep = EvalReport("test", ks)
    for k in ks:
        rep.recall[k], rep.ndcg[k] = r20, n20
    return rep


def test_compare_variants():
    table = compare_variants({"full": report(0.3, 0.2), "no_cal": report(0.3, 0.2), "no_weight": report(0.25, 0.1)},
                             reference="full")
    assert len(table.rows) == 3
    assert all(v == 0.0 for v in table.improvement.values())
    lines = table.to_tsv().splitlines()
    assert len(lines) == 1 + 3 + 1 and lines[-1].startswith("impro.")
    assert lines[0] == "variant\trecall@10\trecall@20\tndcg@10\tndcg@20"
    assert relative_improvement(0.1032, 0.1021) == pytest.approx((0.1032 - 0.1021) / 0.1021, abs=1e-15)


def test_compare_variants_errors():
    with pytest.raises(ValueError):
        compare_variants({"full": report(0.3, 0.2)})
    with pytest.raises(ValueError):
        compare_variants({"a": report(0.3, 0.2), "b": report(0.3, 0.2, ks=(5, 20))})
