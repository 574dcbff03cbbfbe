import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recranker.errors import MetricError
from recranker.evaluation import (
    evaluate,
    format_table,
    hit_ratio,
    improvement,
    ndcg,
    rank_of_ground_truth,
    transition_analysis,
)


def test_rank_of_ground_truth():
    assert rank_of_ground_truth(["a", "b", "c"], "a") == 1
    assert rank_of_ground_truth(["a", "b", "c"], "z") is None
    assert rank_of_ground_truth(["c", "b", "a"], "a") == 3


def test_hit_ratio_examples():
    assert hit_ratio([1, 7, None], 5) == pytest.approx(1 / 3)
    assert hit_ratio([1, 1, 1], 5) == 1.0
    with pytest.raises(MetricError):
        hit_ratio([], 5)


def test_ndcg_examples():
    assert ndcg([1], 5) == 1.0
    assert ndcg([3], 5) == pytest.approx(0.5)
    assert ndcg([6], 5) == 0.0
    assert ndcg([1, 3, None, 6], 5) == pytest.approx(1.5 / 4)
    with pytest.raises(MetricError):
        ndcg([], 3)


def test_literal_ndcg_equals_hit_ratio():
    ranks = [1, 2, 4, None, 9]
    assert ndcg(ranks, 5, literal=True) == hit_ratio(ranks, 5)


def test_saturated_hit_ratio_equals_candidate_hit_rate():
    orders = {"u": ["a", "b"], "v": ["c", "d"], "w": ["e", "f"]}
    held = {"u": "b", "v": "c", "w": "zz"}
    rep = evaluate(orders, held, ks=(2, 10))
    assert rep.hr[10] == rep.hr[2] == rep.candidate_hit_rate == pytest.approx(2 / 3)
    assert rep.hr_hit_subset[2] == 1.0


ranks_st = st.lists(st.one_of(st.none(), st.integers(1, 20)), min_size=1, max_size=50)


@settings(max_examples=200)
@given(ranks_st, st.integers(1, 20))
def test_ndcg_bounded_by_hit_ratio(ranks, k):
    assert 0.0 <= ndcg(ranks, k) <= hit_ratio(ranks, k) <= 1.0


@settings(max_examples=200)
@given(ranks_st, st.integers(1, 19))
def test_metrics_monotone_in_k(ranks, k):
    assert hit_ratio(ranks, k) <= hit_ratio(ranks, k + 1)
    assert ndcg(ranks, k) <= ndcg(ranks, k + 1)


@settings(max_examples=100)
@given(st.permutations(list("abcdefgh")), st.integers(1, 8), st.integers(0, 1000))
def test_invariant_to_shuffling_below_cutoff(order, k, seed):
    held = order[int(np.random.default_rng(seed).integers(len(order)))]
    r = order.index(held) + 1
    cut = max(r, k)
    tail = order[cut:]
    shuffled = order[:cut] + [tail[i] for i in np.random.default_rng(seed).permutation(len(tail))]
    a = evaluate({"u": order}, {"u": held}, ks=(k,))
    b = evaluate({"u": shuffled}, {"u": held}, ks=(k,))
    assert (a.hr, a.ndcg) == (b.hr, b.ndcg)


def test_transition_examples():
    before = {"u": list("abcdefgh"), "v": list("abcdefgh"), "w": list("abc")}
    after = {"u": list("agbcdefh"), "v": list("abcdefgh"), "w": list("cab")}
    held = {"u": "g", "v": "a", "w": "z"}
    tr = transition_analysis(before, after, held, 5)
    assert tr.counts == {"W2R": 1, "R2W": 0, "W2W": 0, "R2R": 1}
    assert tr.total == 2


@settings(max_examples=100)
@given(st.lists(st.tuples(st.permutations(list("abcdef")), st.permutations(list("abcdef")),
                          st.sampled_from(list("abcdefz"))), min_size=1, max_size=30), st.integers(1, 6))
def test_transition_fractions(rows, k):
    before = {str(n): b for n, (b, _, _) in enumerate(rows)}
    after = {str(n): a for n, (_, a, _) in enumerate(rows)}
    held = {str(n): h for n, (_, _, h) in enumerate(rows)}
    tr = transition_analysis(before, after, held, k)
    if tr.total == 0:
        return
    assert math.fsum(tr.fractions.values()) == pytest.approx(1.0)
    rep = evaluate(before, held, ks=(k,))
    assert (tr.counts["R2R"] + tr.counts["R2W"]) / tr.total == pytest.approx(rep.hr_hit_subset[k])


def test_improvement_and_table():
    assert improvement(0.0455, 0.0690) == pytest.approx(51.648, abs=1e-3)
    assert improvement(0.0, 0.1) is None
    orders = {"u": ["a", "b", "c"], "v": ["c", "d", "e"]}
    new = {"u": ["b", "a", "c"], "v": ["c", "d", "e"]}
    held = {"u": "b", "v": "e"}
    base, rer = evaluate(orders, held, ks=(1, 3)), evaluate(new, held, orders, ks=(1, 3))
    table = format_table(base, rer, {1: transition_analysis(orders, new, held, 1)})
    assert "H@1" in table and "n/a" in table and "W2R:      1" in table
