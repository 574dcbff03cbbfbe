import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recranker.corpus import (
    Interaction,
    ItemMeta,
    apply_k_core,
    build_dataset,
    leave_one_out_split,
    make_synthetic_dataset,
    parse_catalog,
    parse_interactions,
)
from recranker.errors import TrainingError
from recranker.retrieval import (
    FactorModel,
    MFConfig,
    load_model,
    predict_rating,
    ranking_gradients,
    ranking_objective,
    rating_gradients,
    rating_objective,
    read_candidates,
    save_model,
    score_items,
    top_candidates,
    train_ranking_mf,
    train_rating_mf,
    user_embeddings,
    write_candidates,
)


def _model(kind="rating", users=("u",), items=("a",), d=1, mu=3.5, ub=None, ib=None, P=None, Q=None):
    return FactorModel(
        kind, tuple(users), tuple(items),
        np.zeros((len(users), d)) if P is None else np.asarray(P, float),
        np.zeros((len(items), d)) if Q is None else np.asarray(Q, float),
        np.zeros(len(users)) if ub is None else np.asarray(ub, float),
        np.zeros(len(items)) if ib is None else np.asarray(ib, float),
        mu,
    )


def _toy_params(rng):
    return {"P": rng.normal(size=(3, 4)), "Q": rng.normal(size=(3, 4)),
            "bu": rng.normal(size=3), "bi": rng.normal(size=3), "mu": 3.0}


def _check_gradient(objective, grads, params, h=1e-6):
    for name in ("P", "Q", "bu", "bi"):
        if name not in grads:
            continue
        flat = params[name].reshape(-1)
        analytic = grads[name].reshape(-1)
        for n in range(flat.size):
            keep = flat[n]
            flat[n] = keep + h
            up = objective(params)
            flat[n] = keep - h
            down = objective(params)
            flat[n] = keep
            numeric = (up - down) / (2 * h)
            assert abs(numeric - analytic[n]) <= 1e-4 * max(1.0, abs(numeric)), (name, n)


def test_rating_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = _toy_params(rng)
    users, items = np.array([0, 0, 1, 2, 2]), np.array([0, 1, 1, 0, 2])
    ratings = np.array([5.0, 3.0, 4.0, 1.0, 2.0])
    grads = rating_gradients(params, users, items, ratings, 0.02)
    _check_gradient(lambda p: rating_objective(p, users, items, ratings, 0.02), grads, params)


def test_ranking_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    params = _toy_params(rng)
    users, pos, neg = np.array([0, 1, 2, 2]), np.array([0, 1, 2, 0]), np.array([1, 2, 0, 1])
    grads = ranking_gradients(params, users, pos, neg, 0.02)
    _check_gradient(lambda p: ranking_objective(p, users, pos, neg, 0.02), grads, params)


def _dataset(rows):
    xs = [Interaction(u, i, float(r), t) for u, i, r, t in rows]
    return build_dataset(xs, {x.item_id: ItemMeta(x.item_id, x.item_id) for x in xs})


def test_constant_ratings_are_predicted_exactly():
    ds = _dataset([(u, i, 4, n) for n, (u, i) in enumerate([("1", "a"), ("1", "b"), ("2", "a"), ("3", "c")])])
    model = train_rating_mf(ds, MFConfig(d=4, epochs=5, seed=0))
    for u in ("1", "2", "3"):
        for i in ("a", "b", "c"):
            assert predict_rating(model, u, i) == pytest.approx(4.0, abs=1e-3)


def test_zero_epochs_gives_mean_and_zero_factors():
    ds = _dataset([("1", "a", 5, 0), ("1", "b", 2, 1), ("2", "a", 3, 2)])
    model = train_rating_mf(ds, MFConfig(d=8, epochs=0))
    assert model.global_mean == pytest.approx(10 / 3)
    assert not model.user_factors.any() and not model.item_factors.any()
    emb = user_embeddings(train_ranking_mf(ds, MFConfig(d=8, epochs=0)))
    assert emb.shape == (2, 8) and not emb.any()


def _validation_rmse(split):
    model = train_rating_mf(split.train, MFConfig(seed=0))
    errs = [predict_rating(model, u, x.item_id) - x.rating for u, x in split.validation.items()]
    return math.sqrt(np.mean(np.square(errs)))


def test_validation_rmse_below_one():
    split = leave_one_out_split(make_synthetic_dataset(n_users=500, seed=3))
    assert _validation_rmse(split) < 1.0


@pytest.mark.skipif(not os.environ.get("ML100K_PATH"), reason="ML100K_PATH not set")
def test_validation_rmse_below_one_on_movielens():
    root = Path(os.environ["ML100K_PATH"])
    xs = apply_k_core(parse_interactions(root / "u.data"), 10)
    split = leave_one_out_split(build_dataset(xs, parse_catalog(root / "u.item")))
    assert _validation_rmse(split) < 1.0


def test_training_loss_decreases(small_split):
    model = train_rating_mf(small_split.train, MFConfig(d=16, epochs=10, seed=0))
    assert model.loss_history[-1] < model.loss_history[0]


def test_divergence_raises(small_split):
    with pytest.raises(TrainingError, match="learning_rate"):
        train_rating_mf(small_split.train, MFConfig(d=16, epochs=5, learning_rate=50.0))


def test_empty_train_raises():
    empty = build_dataset([], {})
    with pytest.raises(TrainingError):
        train_rating_mf(empty)
    with pytest.raises(TrainingError):
        train_ranking_mf(empty)


def test_ranking_mf_learns_positive_over_fresh_item():
    ds = _dataset([("1", "a", 5, 0), ("2", "b", 5, 0), ("2", "a", 5, 1)])
    model = train_ranking_mf(ds, MFConfig(d=4, epochs=300, learning_rate=0.1, batch_size=4, seed=0))
    s = score_items(model, "1")
    assert s[model.item_index["a"]] > s[model.item_index["b"]]


def test_training_is_deterministic(small_split):
    cfg = MFConfig(d=8, epochs=3, seed=11)
    a, b = train_ranking_mf(small_split.train, cfg), train_ranking_mf(small_split.train, cfg)
    assert np.array_equal(a.user_factors, b.user_factors)
    assert np.array_equal(user_embeddings(a), user_embeddings(b))
    assert user_embeddings(a).shape[1] == 8


def test_predict_rating_examples():
    assert predict_rating(_model(), "u", "a") == 3.5
    assert predict_rating(_model(P=[[2.0]], Q=[[1.35]]), "u", "a") == 5.0
    assert predict_rating(_model(ib=[0.4]), "stranger", "a") == pytest.approx(3.9)
    assert predict_rating(_model(mu=-3.0), "u", "a") == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(-5, 5), st.text(max_size=3), st.text(max_size=3))
def test_predict_rating_stays_in_scale(mu, ub, ib, user, item):
    r = predict_rating(_model(mu=mu, ub=[ub], ib=[ib], P=[[ub]], Q=[[ib]]), user, item)
    assert 1.0 <= r <= 5.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_top_candidates_equals_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    n_users, n_items = 4, 9
    rows = [(str(u), str(i), 4, 0) for u in range(n_users) for i in range(n_items) if rng.random() < 0.4]
    rows.append(("0", "0", 4, 0))
    ds = _dataset(rows)
    users, items = tuple(ds.users), tuple(ds.items)
    # Rounded scores force plenty of ties.
    model = _model("ranking", users, items, d=2,
                   P=rng.integers(-2, 3, (len(users), 2)), Q=rng.integers(-2, 3, (len(items), 2)), mu=0.0)
    for u in users:
        cl = top_candidates(model, ds, u, k)
        seen = {x.item_id for x in ds.by_user[u]}
        full = []
        for n, it in enumerate(items):
            if it not in seen:
                full.append((-float(model.user_factors[model.user_index[u]] @ model.item_factors[n]), int(it), it))
        expect = [it for _, _, it in sorted(full)[:k]]
        assert list(cl.items) == expect
        assert list(cl.scores) == sorted(cl.scores, reverse=True)


def test_user_with_every_item_is_degenerate():
    ds = _dataset([("1", "a", 5, 0), ("1", "b", 4, 1), ("2", "a", 3, 0)])
    model = train_ranking_mf(ds, MFConfig(d=2, epochs=1))
    cl = top_candidates(model, ds, "1", 10)
    assert cl.degenerate and len(cl) == 0
    assert len(top_candidates(model, ds, "2", 10)) == 1


def test_model_and_candidates_round_trip(tmp_path, small_split, small_models):
    rating, ranking = small_models
    for m in (rating, ranking):
        p = tmp_path / f"{m.kind}.txt"
        save_model(p, m)
        back = load_model(p)
        assert back.kind == m.kind and back.user_ids == m.user_ids
        assert np.array_equal(back.item_factors, m.item_factors)
        assert back.global_mean == m.global_mean
        assert p.read_text().startswith("#recranker-factor-model v1\n#kind=")
    lists = [top_candidates(ranking, small_split.train, u, 10) for u in list(small_split.test)[:5]]
    p = tmp_path / "cands.tsv"
    write_candidates(p, lists)
    assert read_candidates(p) == {cl.user_id: cl for cl in lists}
