from __future__ import annotations

import math

import numpy as np
import pytest

from idealrec.metrics import (
    CURVE_HEADER,
    MetricError,
    ScoredItem,
    auc,
    auc_arrays,
    emit_curves,
    emit_revenue,
    hitrate_at_k,
    ndcg_at_k,
    rank_in_candidates,
    ranking_metrics,
    ranks_batch,
    read_csv,
    uauc,
    uauc_arrays,
)


def _items(pos, neg, user=0):
    return [ScoredItem(user, s, 1) for s in pos] + [ScoredItem(user, s, 0) for s in neg]


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert auc(_items([0.9, 0.8], [0.3, 0.2])) == 1.0
    assert auc(_items([0.7, 0.4], [0.5, 0.3])) == 0.75
    assert auc(_items([0.5], [0.5])) == 0.5


def test_auc_single_class_rejected():
    with pytest.raises(MetricError):
        auc(_items([0.1, 0.2], []))


def test_auc_matches_pair_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 1, 0
        # coarse grid so ties actually occur
        scores = np.round(rng.random(n), 1)
        assert auc_arrays(scores, labels) == pytest.approx(_brute_auc(scores, labels), abs=1e-12)


def test_auc_invariant_under_monotone_transforms(rng):
    for _ in range(50):
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        base = auc_arrays(scores, labels)
        assert auc_arrays(np.exp(scores), labels) == base
        assert auc_arrays(3.0 * scores - 7.0, labels) == base


def test_uauc_examples():
    one = _items([0.7, 0.4], [0.5, 0.3])
    assert uauc(one) == auc(one)
    two = _items([0.9], [0.1], user=1) + _items([0.5], [0.5], user=2)
    assert uauc(two) == 0.75
    with_pos_only = two + _items([0.3, 0.2], [], user=3)
    assert uauc(with_pos_only) == 0.75
    value, excluded = uauc_arrays(np.array([s.user for s in with_pos_only]),
                                  np.array([s.score for s in with_pos_only]),
                                  np.array([s.label for s in with_pos_only]))
    assert value == 0.75 and excluded == [3]


def test_uauc_without_eligible_users_rejected():
    with pytest.raises(MetricError):
        uauc(_items([0.1], [], user=0) + _items([], [0.4], user=1))


def test_ndcg_and_hitrate_examples():
    assert ndcg_at_k(1, 10) == 1.0 and hitrate_at_k(1, 10) == 1
    assert ndcg_at_k(3, 10) == 0.5
    assert ndcg_at_k(11, 10) == 0.0 and hitrate_at_k(11, 10) == 0
    with pytest.raises(MetricError):
        ndcg_at_k(0, 10)


def test_rank_examples():
    assert rank_in_candidates([0.9, 0.1, 0.2], 0) == 1
    assert rank_in_candidates([0.5, 0.9, 0.5, 0.1], 0) == 3
    assert rank_in_candidates([0.1, 0.7, 0.05], [0, 1, 0]) == 1


def test_rank_requires_exactly_one_ground_truth():
    with pytest.raises(MetricError):
        rank_in_candidates([0.1, 0.2], [0, 0])
    with pytest.raises(MetricError):
        rank_in_candidates([0.1, 0.2], [1, 1])


def test_ranking_matches_sort_oracle(rng):
    for _ in range(100):
        m = int(rng.integers(1, 30))
        scores = np.round(rng.random(m + 1), 1)
        gt = int(rng.integers(m + 1))
        # pessimistic sort: ground truth placed after every equal-scoring negative
        order = sorted(range(m + 1), key=lambda i: (-scores[i], i == gt))
        expected = order.index(gt) + 1
        assert rank_in_candidates(scores, gt) == expected
        row = np.concatenate([[scores[gt]], np.delete(scores, gt)])
        assert ranks_batch(row[None, :])[0] == expected
        k = int(rng.integers(1, m + 2))
        assert ndcg_at_k(expected, k) == (1.0 / math.log2(expected + 1) if expected <= k else 0.0)


def test_ranking_metrics_average():
    out = ranking_metrics(np.array([1, 3, 25]), ks=(10, 20))
    assert out["hr@10"] == pytest.approx(2 / 3)
    assert out["ndcg@10"] == pytest.approx((1.0 + 0.5) / 3)
    assert out["hr@20"] == pytest.approx(2 / 3)


def _row(policy="ideal", budget=0.1, seed=0):
    return {"policy": policy, "backbone": "mean-pool-attention", "budget": budget, "realized_freq": 0.0987654321,
            "auc": 0.8, "uauc": 0.7, "ndcg@10": 0.5, "hr@10": 0.6, "ndcg@20": 0.55, "hr@20": 0.65, "seed": seed}


def test_emit_curves_schema(tmp_path):
    assert emit_curves([]) == ",".join(CURVE_HEADER) + "\n"
    text = emit_curves([_row()], tmp_path / "c.csv")
    lines = text.splitlines()
    assert lines[0] == "policy,backbone,budget,realized_freq,auc,uauc,ndcg@10,hr@10,ndcg@20,hr@20,seed"
    assert len(lines) == 2 and len(lines[1].split(",")) == 11
    assert lines[1].split(",")[2:4] == ["0.100000", "0.098765"]
    assert read_csv(tmp_path / "c.csv")[0]["policy"] == "ideal"


def test_emit_curves_sorted_and_deterministic():
    rows = [_row("random", 0.5, 1), _row("ideal", 0.5, 0), _row("ideal", 0.1, 1), _row("ideal", 0.1, 0)]
    text = emit_curves(rows)
    assert text == emit_curves(list(reversed(rows)))
    keys = [tuple(line.split(",")[i] for i in (0, 2, 10)) for line in text.splitlines()[1:]]
    assert keys == [("ideal", "0.100000", "0"), ("ideal", "0.100000", "1"), ("ideal", "0.500000", "0"),
                    ("random", "0.500000", "1")]


def test_emit_revenue_header():
    text = emit_revenue([{"group": 1, "mean_mrs": 0.2, "auc_fresh": 0.8, "auc_stale": 0.7, "revenue": 0.1}])
    assert text.splitlines()[0] == "group,mean_mrs,auc_fresh,auc_stale,revenue"
    assert text.splitlines()[1] == "1,0.200000,0.800000,0.700000,0.100000"
