import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reliability_fusion.data import build_dataset, split_dataset
from reliability_fusion.metrics import (evaluate, evaluate_scores, ndcg_at_k, rank_items, rank_scores,
                                        recall_at_k)
from reliability_fusion.model import STAGE_I, init_params
from reliability_fusion.synth import SyntheticSpec, generate


def test_rank_scores_examples():
    assert list(rank_scores([0.1, 0.9, 0.5])) == [1, 2, 0]
    assert list(rank_scores([0.3, 0.3, 0.3, 0.3])) == [0, 1, 2, 3]
    assert 1 not in rank_scores([0.1, 0.9, 0.5], exclude=[1])
    assert list(rank_scores([0.1, 0.9, 0.5], top=2)) == [1, 2]


def test_rank_items_matches_scores():
    rng = np.random.default_rng(0)
    feats = [rng.standard_normal((6, 3)), rng.standard_normal((6, 2))]
    p = init_params(2, 6, 2, 4, [3, 2], seed=1, std=0.5)
    ranked = rank_items(p, feats, 1, exclude=[0, 3])
    assert sorted(ranked) == [1, 2, 4, 5]


def test_recall_examples():
    assert recall_at_k([5, 1, 2], {5}, 10) == 1.0
    ranked = list(range(20))
    assert recall_at_k(ranked, {10}, 10) == 0.0
    assert recall_at_k(ranked, {3, 15}, 10) == 0.5
    with pytest.raises(ValueError):
        recall_at_k(ranked, set(), 10)


def test_ndcg_examples():
    assert ndcg_at_k([7, 1, 2], {7}, 10) == 1.0
    assert abs(ndcg_at_k([1, 7, 2], {7}, 2) - 1 / math.log2(3)) < 1e-12
    assert abs(1 / math.log2(3) - 0.63093) < 1e-5
    assert ndcg_at_k([1, 2, 3], {9}, 3) == 0.0


def test_ndcg_truncated_ideal():
    # 3 relevant, K=2, both top slots relevant -> ideal over min(3, 2) positions
    assert abs(ndcg_at_k([0, 1, 5, 2], {0, 1, 2}, 2) - 1.0) < 1e-12


def dcg_oracle(ranked, relevant, k):
    dcg = sum(1 / math.log2(r + 1) for r in range(1, k + 1) if ranked[r - 1] in relevant)
    ideal = sum(1 / math.log2(r + 1) for r in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


@settings(max_examples=100, deadline=None)
@given(st.permutations(list(range(15))), st.sets(st.integers(0, 14), min_size=1, max_size=6), st.integers(1, 15))
def test_ndcg_oracle_and_bounds(ranked, relevant, k):
    got = ndcg_at_k(ranked, relevant, k)
    assert abs(got - dcg_oracle(ranked, relevant, k)) < 1e-12
    assert 0.0 <= got <= 1.0 + 1e-12
    assert 0.0 <= recall_at_k(ranked, relevant, k) <= 1.0


@pytest.fixture(scope="module")
def small():
    ds, feats, _ = generate(SyntheticSpec(user_count=60, item_count=50, interactions_per_user=8, seed=3))
    ds = split_dataset(ds, seed=3)
    params = init_params(ds.user_count, ds.item_count, 2, 8, [32, 32], seed=0, std=0.3)
    return ds, feats, params


def test_report_range_and_monotone_in_k(small):
    ds, feats, params = small
    rep = evaluate(params, feats, ds, "val", (5, 10, 20))
    assert rep.users_evaluated == sum(1 for u in range(ds.user_count) if len(ds.positives(1)[u]))
    for k in (5, 10, 20):
        assert 0 <= rep.recall[k] <= 1 and 0 <= rep.ndcg[k] <= 1
    assert rep.recall[5] <= rep.recall[10] <= rep.recall[20]
    assert rep.to_tsv().splitlines()[0] == "split\tk\trecall\tndcg\tusers"


def test_oracle_scores_perfect_model(small):
    ds, _, _ = small
    relevant = ds.positives(2)

    def oracle(users):
        s = np.zeros((len(users), ds.item_count))
        for row, u in enumerate(users):
            s[row, relevant[u]] = 1.0
        return s

    rep = evaluate_scores(oracle, ds, "test", (1, 20))
    assert rep.recall[20] == 1.0 and rep.ndcg[20] == 1.0
    sizes = [len(relevant[u]) for u in range(ds.user_count) if len(relevant[u])]
    assert abs(rep.recall[1] - np.mean([1 / n for n in sizes])) < 1e-12
    assert rep.ndcg[1] == 1.0


def test_monotone_transform_invariance(small):
    ds, feats, params = small
    base = evaluate(params, feats, ds, "test", (10, 20))
    from reliability_fusion.model import score_users
    warped = evaluate_scores(lambda u: np.exp(3 * score_users(params, feats, u)) + 2, ds, "test", (10, 20))
    assert base.recall == warped.recall and base.ndcg == warped.ndcg


def test_thread_count_invariance(small):
    ds, feats, params = small
    reports = [evaluate(params, feats, ds, "val", (10, 20), STAGE_I, workers=w) for w in (1, 2, 4)]
    assert all(r.recall == reports[0].recall and r.ndcg == reports[0].ndcg for r in reports)


def test_test_split_excludes_train_and_val():
    ds = split_dataset(build_dataset([("a", f"i{j}") for j in range(10)] + [("b", "i0")]), seed=0)
    seen = set(ds.positives(0)[0]) | set(ds.positives(1)[0])
    target = ds.positives(2)[0][0]

    def score(users):
        s = np.zeros((len(users), ds.item_count))
        s[:, sorted(seen)] = 10.0  # would crowd out the target if not excluded
        s[:, target] = 1.0
        return s

    rep = evaluate_scores(score, ds, "test", (1,))
    assert rep.recall[1] == 1.0


def test_bad_split_rejected(small):
    ds, feats, params = small
    with pytest.raises(ValueError):
        evaluate(params, feats, ds, "train")
