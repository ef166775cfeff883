import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from analogykg.metrics import (
    MetricsReport,
    RankingResult,
    TieRule,
    hits_at_k,
    mrr,
    random_mrr,
    rank_of,
    unit_distance,
)


def test_unique_max_is_rank_one():
    for rule in TieRule:
        assert rank_of({1: 0.9, 2: 0.1, 3: 0.5}, 1, rule) == 1


def test_three_way_tie():
    scores = {0: 1.0, 1: 1.0, 2: 1.0, 3: 0.2}
    assert rank_of(scores, 1, TieRule.OPTIMISTIC) == 1
    assert rank_of(scores, 1, TieRule.PESSIMISTIC) == 3
    assert rank_of(scores, 1, TieRule.EXPECTED_RANDOM) == 2


def test_all_equal_five():
    assert rank_of({i: 0.0 for i in range(5)}, 4) == 3


def test_gold_missing():
    with pytest.raises(KeyError):
        rank_of({0: 1.0}, 7)


def test_hits_examples():
    assert hits_at_k([1, 1, 1], 1) == 1.0
    assert hits_at_k([1, 3, 11], 3) == pytest.approx(2 / 3)
    assert hits_at_k([1, 3, 11], 11) == 1.0
    with pytest.raises(ValueError):
        hits_at_k([], 1)
    with pytest.raises(ValueError):
        hits_at_k([0.5], 1)


def test_mrr_examples():
    assert mrr([1, 1]) == 1.0
    assert mrr([1, 2, 4]) == pytest.approx(1.75 / 3)
    with pytest.raises(ValueError):
        mrr([])


def test_random_mrr_harmonic():
    assert random_mrr(120) == pytest.approx(float(sum(Fraction(1, k) for k in range(1, 121)) / 120), abs=1e-15)
    assert random_mrr(120) == pytest.approx(0.04474, abs=1e-5)


def brute_force(score_table, golds):
    """Metrics by literally walking a sorted list; ties broken optimistically."""
    ranks = []
    for scores, gold in zip(score_table, golds):
        pos = 1
        for e, s in enumerate(scores):
            if e != gold and s > scores[gold]:
                pos += 1
        ranks.append(pos)
    hits = {k: Fraction(sum(1 for r in ranks if r <= k), len(ranks)) for k in (1, 3, 5, 10)}
    m = sum(Fraction(1, r) for r in ranks) / len(ranks)
    return ranks, hits, m


def test_metric_oracle_20_entities_5_queries():
    rng = np.random.default_rng(0)
    table = rng.integers(0, 6, size=(5, 20)).astype(float)  # many ties on purpose
    golds = [int(g) for g in rng.integers(0, 20, size=5)]
    ranks_bf, hits_bf, mrr_bf = brute_force(table, golds)
    res = [RankingResult.from_scores(np.arange(20), row, g, TieRule.OPTIMISTIC) for row, g in zip(table, golds)]
    ranks = [r.gold_rank for r in res]
    assert ranks == ranks_bf
    rep = MetricsReport.from_ranks(ranks, TieRule.OPTIMISTIC)
    assert (rep.hits1, rep.hits3, rep.hits5, rep.hits10) == tuple(float(hits_bf[k]) for k in (1, 3, 5, 10))
    assert rep.mrr == float(mrr_bf)


def test_random_predictor_mrr_band():
    rng = np.random.default_rng(12345)
    n, trials = 120, 10_000
    ranks = []
    for _ in range(trials):
        scores = rng.random(n)
        ranks.append(rank_of(dict(enumerate(scores)), 0))
    assert abs(mrr(ranks) - random_mrr(n)) <= 0.005


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1, 500), min_size=1, max_size=40))
def test_hits_monotone_and_mrr_bounds(ranks):
    h = [hits_at_k(ranks, k) for k in (1, 3, 5, 10)]
    assert h == sorted(h)
    assert h[0] <= mrr(ranks) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=2, max_size=15), st.data())
def test_rank_rules_ordered_and_dropping_competitors_helps(scores, data):
    gold = data.draw(st.integers(0, len(scores) - 1))
    table = dict(enumerate(map(float, scores)))
    o, e, p = (rank_of(table, gold, r) for r in (TieRule.OPTIMISTIC, TieRule.EXPECTED_RANDOM, TieRule.PESSIMISTIC))
    assert 1 <= o <= e <= p <= len(scores)
    assert e == (o + p) / 2
    drop = data.draw(st.sets(st.sampled_from([k for k in table if k != gold])) if len(table) > 1 else st.just(set()))
    filtered = {k: v for k, v in table.items() if k not in drop}
    for rule in TieRule:
        assert rank_of(filtered, gold, rule) <= rank_of(table, gold, rule)


def test_ranking_result_order_and_topk():
    res = RankingResult.from_scores([5, 3, 9], [0.1, 0.7, 0.7], 9)
    assert [e for e, _ in res.ordered] == [3, 9, 5]
    assert res.gold_rank == 1.5
    assert res.topk(1) == [(3, 0.7)]
    with pytest.raises(KeyError):
        RankingResult.from_scores([1, 2], [0.0, 1.0], 3)


def test_report_json_round_trip():
    rep = MetricsReport.from_ranks([1, 2, 4], per_setting={"blended": MetricsReport.from_ranks([1])})
    js = rep.to_json()
    assert set(js) == {"hits@1", "hits@3", "hits@5", "hits@10", "mrr", "n", "tie_rule", "per_setting"}
    assert MetricsReport.from_json(js) == rep


def test_unit_distance_bounds():
    assert unit_distance([1, 0], [3, 0]) == 0.0
    assert unit_distance([1, 0], [-2, 0]) == 2.0
    assert unit_distance([1, 0], [0, 5]) == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        unit_distance([0, 0], [1, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_unit_distance_in_range(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    assert 0.0 <= unit_distance(a, b) <= 2.0 + 1e-12
