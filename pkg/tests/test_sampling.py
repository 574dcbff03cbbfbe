import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from recranker.corpus import Interaction, ItemMeta, build_dataset
from recranker.errors import ConfigError, ContractError
from recranker.sampling import (
    SamplingConfig,
    UserMultiset,
    adaptive_sampling,
    cluster_users,
    clustering_probabilities,
    clustering_sampling,
    format_report,
    importance_probabilities,
    importance_sampling,
    multiset_sum,
    penalty_probabilities,
    penalty_resampling,
    read_multiset,
    sampling_report,
    select_training_candidates,
    write_multiset,
)

from conftest import make_split


def train_with_counts(counts):
    xs = [Interaction(u, f"i{n}", 4.0, n) for u, q in counts.items() for n in range(q)]
    return build_dataset(xs, {x.item_id: ItemMeta(x.item_id, x.item_id) for x in xs})


def test_importance_probabilities_powers_of_two():
    p = importance_probabilities(train_with_counts({"a": 2, "b": 4, "c": 8}))
    assert p == pytest.approx({"a": 1 / 6, "b": 2 / 6, "c": 3 / 6}, abs=1e-12)


def test_importance_probabilities_examples():
    assert importance_probabilities(train_with_counts({"a": 10, "b": 100})) == pytest.approx({"a": 1 / 3, "b": 2 / 3})
    uniform = importance_probabilities(train_with_counts({"a": 5, "b": 5, "c": 5}))
    assert list(uniform.values()) == pytest.approx([1 / 3] * 3)


def test_importance_excludes_single_interaction_users(caplog):
    p = importance_probabilities(train_with_counts({"a": 1, "b": 3}))
    assert p == {"b": 1.0}
    assert "excluded 1" in caplog.text


def test_importance_sampling_single_user():
    ms = importance_sampling(train_with_counts({"a": 3}), 1, seed=0)
    assert ms.multiplicity == {"a": 1}


def test_importance_sampling_is_seeded():
    train = train_with_counts({"a": 2, "b": 4, "c": 8})
    assert importance_sampling(train, 500, 7) == importance_sampling(train, 500, 7)


def test_clustering_probabilities_sixty_forty():
    assign = {f"u{n}": (0 if n < 60 else 1) for n in range(100)}
    p = clustering_probabilities(assign)
    assert p["u0"] == pytest.approx(60 / 5200) and p["u99"] == pytest.approx(40 / 5200)
    assert math.fsum(p.values()) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("assign", [{"a": 0, "b": 0, "c": 1, "d": 1}, {"a": 0, "b": 0, "c": 0}])
def test_clustering_probabilities_uniform_cases(assign):
    p = clustering_probabilities(assign)
    assert list(p.values()) == pytest.approx([1 / len(assign)] * len(assign))


def test_clustering_sampling_chi_square():
    assign = {f"u{n}": (0 if n < 6 else 1 if n < 9 else 2) for n in range(10)}
    p = clustering_probabilities(assign)
    ms = clustering_sampling(assign, 100_000, seed=5)
    users = sorted(p)
    observed = [ms.multiplicity.get(u, 0) for u in users]
    expected = [p[u] * 100_000 for u in users]
    assert chisquare(observed, expected).pvalue > 0.01


def test_penalty_probabilities_example():
    p = penalty_probabilities(UserMultiset({"a": 1, "b": 2}), 0.92)
    assert p["a"] == pytest.approx(0.92 / (0.92 + 0.8464))
    assert p["a"] == pytest.approx(0.5208, abs=5e-5) and p["b"] == pytest.approx(0.4792, abs=5e-5)


def test_penalty_uniform_and_near_one_limit():
    p = penalty_probabilities(UserMultiset({"a": 3, "b": 3, "c": 3}), 0.5)
    assert list(p.values()) == pytest.approx([1 / 3] * 3)
    p = penalty_probabilities(UserMultiset({"a": 1, "b": 40}), 1 - 1e-9)
    assert p["a"] == pytest.approx(0.5, abs=1e-6)


def test_penalty_large_multiplicities_do_not_underflow():
    p = penalty_probabilities(UserMultiset({"a": 5000, "b": 5001}), 0.92)
    assert p["a"] == pytest.approx(1 / 1.92)


@pytest.mark.parametrize("C", [0.0, 1.0, 1.5])
def test_penalty_constant_bounds(C):
    with pytest.raises(ConfigError):
        penalty_probabilities(UserMultiset({"a": 1}), C)


def test_penalty_resampling_chi_square():
    combined = UserMultiset({"a": 1, "b": 2, "c": 5, "d": 9})
    p = penalty_probabilities(combined, 0.92)
    ms = penalty_resampling(combined, 100_000, 0.92, seed=2)
    users = sorted(p)
    assert chisquare([ms.multiplicity.get(u, 0) for u in users], [p[u] * 100_000 for u in users]).pvalue > 0.01


def test_penalty_increases_diversity():
    rng = np.random.default_rng(0)
    penalised, proportional = [], []
    for trial in range(120):
        counts = {f"u{n}": int(c) for n, c in enumerate(rng.geometric(0.15, size=60))}
        combined = UserMultiset(counts)
        penalised.append(len(penalty_resampling(combined, 60, 0.92, trial).multiplicity))
        users = combined.underlying
        w = np.array([counts[u] for u in users], dtype=float)
        picks = np.random.default_rng(trial).choice(len(users), 60, p=w / w.sum())
        proportional.append(len(set(picks)))
    assert np.mean(penalised) >= np.mean(proportional)


def test_probability_sums(small_split):
    train = small_split.train
    assert math.fsum(importance_probabilities(train).values()) == pytest.approx(1.0, abs=1e-12)
    labels = cluster_users(np.random.default_rng(0).normal(size=(len(train.users), 3)), 4, 0)
    assign = dict(zip(train.users, labels))
    assert math.fsum(clustering_probabilities(assign).values()) == pytest.approx(1.0, abs=1e-12)
    ms = UserMultiset({u: n % 5 + 1 for n, u in enumerate(train.users)})
    assert math.fsum(penalty_probabilities(ms, 0.92).values()) == pytest.approx(1.0, abs=1e-12)


def test_kmeans_single_cluster_and_singletons():
    X = np.random.default_rng(1).normal(size=(7, 2))
    assert set(cluster_users(X, 1, 0)) == {0}
    assert sorted(cluster_users(X, 7, 0)) == list(range(7))
    with pytest.raises(ConfigError):
        cluster_users(X, 8, 0)


def test_kmeans_recovers_separated_clouds():
    rng = np.random.default_rng(2)
    X = np.vstack([rng.normal(0, 0.1, (30, 2)), rng.normal(10, 0.1, (20, 2))])
    labels = cluster_users(X, 2, seed=4)
    assert len(set(labels[:30])) == 1 and len(set(labels[30:])) == 1
    assert labels[0] != labels[30]


def test_kmeans_repairs_empty_clusters():
    X = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    labels = cluster_users(X, 3, seed=0)
    assert sorted(set(labels)) == [0, 1, 2]


def test_multiset_sum_examples():
    assert multiset_sum(UserMultiset({"a": 2}), UserMultiset({"a": 1, "b": 1})) == UserMultiset({"a": 3, "b": 1})
    x = UserMultiset({"a": 2})
    assert x + UserMultiset({}) == x


multisets = st.dictionaries(st.sampled_from("abcdef"), st.integers(1, 5)).map(UserMultiset)


@given(multisets, multisets, multisets)
def test_multiset_laws(a, b, c):
    assert a + b == b + a
    assert (a + b) + c == a + (b + c)
    assert len(a + b) == len(a) + len(b)
    for u in (a + b).underlying:
        assert (a + b).multiplicity[u] == a.multiplicity.get(u, 0) + b.multiplicity.get(u, 0)


def test_multiset_rejects_zero():
    with pytest.raises(ValueError):
        UserMultiset({"a": 0})


def test_adaptive_sampling_sizes(small_split, small_models):
    _, ranking = small_models
    cfg = SamplingConfig(n_target=300, clusters=4, seed=1)
    u1, u2, u3, u_ins = adaptive_sampling(small_split.train, ranking.user_factors, cfg)
    assert len(u1) == len(u2) == len(u_ins) == 300
    assert u3 == u1 + u2
    assert set(u_ins.underlying) <= set(u3.underlying)


def _candidate_split():
    rows = [("u", "L1", 5, 1), ("u", "D1", 2, 2), ("u", "D2", 1, 3), ("u", "D3", 2, 4), ("u", "V", 4, 5), ("u", "T", 4, 6)]
    rows += [("v", f"N{n}", 3, n) for n in range(12)] + [("v", "L1", 3, 20), ("v", "D1", 3, 21)]
    return make_split(rows)


def test_training_candidates_composition(small_split):
    user = small_split.train.users[0]
    cs = select_training_candidates(small_split, user, 10, (3, 3, 4), seed=0)
    labels = [e.label for e in cs.entries]
    assert len(labels) == 10
    liked = labels.count("liked")
    disliked = labels.count("disliked")
    assert liked <= 3 and disliked <= 3 and labels.count("negative") == 10 - liked - disliked


def test_training_candidates_backfill_with_negatives():
    sp = _candidate_split()
    cs = select_training_candidates(sp, "u", 10, (3, 3, 4), seed=0)
    labels = [e.label for e in cs.entries]
    assert labels.count("liked") == 1 and labels.count("disliked") == 3 and labels.count("negative") == 6


def test_negatives_never_touched_items(small_split):
    for n, user in enumerate(small_split.train.users):
        cs = select_training_candidates(small_split, user, 10, seed=n)
        touched = {x.item_id for x in small_split.train.by_user[user]}
        touched |= {small_split.validation[user].item_id, small_split.test[user].item_id}
        for e in cs.entries:
            assert (e.item_id in touched) == (e.label != "negative")


def test_training_candidates_errors():
    sp = _candidate_split()
    with pytest.raises(ConfigError):
        select_training_candidates(sp, "u", 10, (3, 3, 3))
    with pytest.raises(ContractError):
        select_training_candidates(sp, "u", 18, (3, 3, 12))
    with pytest.raises(KeyError):
        select_training_candidates(sp, "ghost", 10)


def test_multiset_round_trip_and_report(tmp_path):
    ms = UserMultiset({"2": 3, "10": 1})
    p = tmp_path / "users.tsv"
    write_multiset(p, ms)
    assert p.read_text() == "user\tmultiplicity\n2\t3\n10\t1\n"
    assert read_multiset(p) == ms
    rep = sampling_report(ms)
    assert rep["size"] == 4 and rep["distinct"] == 2 and rep["max_multiplicity"] == 3
    assert rep["entropy"] == pytest.approx(-(0.75 * math.log(0.75) + 0.25 * math.log(0.25)))
    assert "[final]\nsize = 4" in format_report({"final": rep})
