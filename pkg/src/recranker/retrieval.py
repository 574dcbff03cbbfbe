"""Matrix-factorization retrieval: rating MF (squared error) and ranking MF (pairwise, sampled negatives)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .corpus import Dataset, id_key
from .errors import ParseError, TrainingError

log = logging.getLogger(__name__)

MODEL_MAGIC = "#recranker-factor-model v1"


@dataclass
class MFConfig:
    d: int = 64
    learning_rate: float = 0.01
    regularization: float = 0.02
    epochs: int = 30
    negatives: int = 4
    batch_size: int = 256
    seed: int = 0


@dataclass(frozen=True)
class FactorModel:
    kind: str  # "rating" | "ranking"
    user_ids: tuple
    item_ids: tuple
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_mean: float
    scale_max: int = 5
    seed: int = 0
    loss_history: tuple = field(default=(), compare=False)

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.item_ids)}


@dataclass(frozen=True)
class CandidateList:
    user_id: str
    items: tuple
    scores: tuple

    @property
    def degenerate(self) -> bool:
        return not self.items

    def __len__(self):
        return len(self.items)


# -- objectives and gradients ---------------------------------------------------
# params: dict with P (users x d), Q (items x d), bu, bi, and scalar mu.

def rating_objective(params, users, items, ratings, reg) -> float:
    """Sum over samples of 0.5*err^2 + 0.5*reg*(|p_u|^2 + |q_i|^2 + b_u^2 + b_i^2)."""
    P, Q, bu, bi = params["P"][users], params["Q"][items], params["bu"][users], params["bi"][items]
    err = ratings - (params["mu"] + bu + bi + np.einsum("nd,nd->n", P, Q))
    penalty = (P * P).sum() + (Q * Q).sum() + (bu * bu).sum() + (bi * bi).sum()
    return float(0.5 * (err @ err) + 0.5 * reg * penalty)


def _rating_terms(params, users, items, ratings, reg):
    """Per-sample gradient rows as (param, index, rows) triples."""
    P, Q, bu, bi = params["P"][users], params["Q"][items], params["bu"][users], params["bi"][items]
    err = ratings - (params["mu"] + bu + bi + np.einsum("nd,nd->n", P, Q))
    return (
        ("P", users, -err[:, None] * Q + reg * P),
        ("Q", items, -err[:, None] * P + reg * Q),
        ("bu", users, -err + reg * bu),
        ("bi", items, -err + reg * bi),
    )


def _accumulate(params, terms) -> dict:
    grads = {}
    for name, idx, rows in terms:
        g = grads.setdefault(name, np.zeros_like(params[name]))
        np.add.at(g, idx, rows)
    return grads


def _step(params, terms, lr) -> None:
    # Sparse in-place SGD step; equivalent to params -= lr * _accumulate(...).
    for name, idx, rows in terms:
        order = np.argsort(idx, kind="stable")
        sidx = idx[order]
        starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
        params[name][sidx[starts]] -= lr * np.add.reduceat(rows[order], starts, axis=0)


def rating_gradients(params, users, items, ratings, reg) -> dict:
    return _accumulate(params, _rating_terms(params, users, items, ratings, reg))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ranking_objective(params, users, pos, neg, reg) -> float:
    """Sum over triples of -log sigmoid(x_ui - x_uj) plus L2 on the touched rows."""
    P, Qi, Qj = params["P"][users], params["Q"][pos], params["Q"][neg]
    bi, bj = params["bi"][pos], params["bi"][neg]
    diff = np.einsum("nd,nd->n", P, Qi - Qj) + bi - bj
    penalty = (P * P).sum() + (Qi * Qi).sum() + (Qj * Qj).sum() + (bi * bi).sum() + (bj * bj).sum()
    return float(np.logaddexp(0.0, -diff).sum() + 0.5 * reg * penalty)


def _ranking_terms(params, users, pos, neg, reg):
    P, Qi, Qj = params["P"][users], params["Q"][pos], params["Q"][neg]
    bi, bj = params["bi"][pos], params["bi"][neg]
    diff = np.einsum("nd,nd->n", P, Qi - Qj) + bi - bj
    g = _sigmoid(-diff)
    return (
        ("P", users, -g[:, None] * (Qi - Qj) + reg * P),
        ("Q", pos, -g[:, None] * P + reg * Qi),
        ("Q", neg, g[:, None] * P + reg * Qj),
        ("bi", pos, -g + reg * bi),
        ("bi", neg, g + reg * bj),
    )


def ranking_gradients(params, users, pos, neg, reg) -> dict:
    return _accumulate(params, _ranking_terms(params, users, pos, neg, reg))


# -- training -----------------------------------------------------------------------

def _init_params(n_users, n_items, cfg: MFConfig, rng, mu):
    if cfg.epochs == 0:
        P = np.zeros((n_users, cfg.d))
        Q = np.zeros((n_items, cfg.d))
    else:
        P = rng.uniform(-0.01, 0.01, (n_users, cfg.d))
        Q = rng.uniform(-0.01, 0.01, (n_items, cfg.d))
    return {"P": P, "Q": Q, "bu": np.zeros(n_users), "bi": np.zeros(n_items), "mu": mu}


def _check_finite(loss, epoch, kind):
    if not np.isfinite(loss):
        raise TrainingError(
            f"{kind} MF diverged at epoch {epoch} (loss={loss}); try a smaller learning_rate"
        )


def _to_model(kind, train: Dataset, params, cfg, history) -> FactorModel:
    return FactorModel(
        kind=kind,
        user_ids=tuple(train.users),
        item_ids=tuple(train.items),
        user_factors=params["P"],
        item_factors=params["Q"],
        user_bias=params["bu"],
        item_bias=params["bi"],
        global_mean=float(params["mu"]),
        scale_max=train.scale_max,
        seed=cfg.seed,
        loss_history=tuple(history),
    )


def _encode(train: Dataset):
    if not train.interactions:
        raise TrainingError("cannot train on an empty train set")
    uidx, iidx = train.user_index, train.item_index
    users = np.fromiter((uidx[x.user_id] for x in train.interactions), dtype=np.int64)
    items = np.fromiter((iidx[x.item_id] for x in train.interactions), dtype=np.int64)
    ratings = np.fromiter((x.rating for x in train.interactions), dtype=np.float64)
    return users, items, ratings


def train_rating_mf(train: Dataset, config: MFConfig | None = None) -> FactorModel:
    """Biased MF fit by minibatch SGD on regularized squared error."""
    cfg = config or MFConfig()
    users, items, ratings = _encode(train)
    rng = np.random.default_rng(cfg.seed)
    params = _init_params(len(train.users), len(train.items), cfg, rng, float(ratings.mean()))
    # Overflow during divergence is reported by _check_finite instead.
    with np.errstate(over="ignore", invalid="ignore"):
        history = _fit_rating(params, users, items, ratings, cfg, rng)
    return _to_model("rating", train, params, cfg, history)


def _fit_rating(params, users, items, ratings, cfg, rng):
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ratings))
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            terms = _rating_terms(params, users[b], items[b], ratings[b], cfg.regularization)
            _step(params, terms, cfg.learning_rate)
        loss = rating_objective(params, users, items, ratings, cfg.regularization) / len(ratings)
        _check_finite(loss, epoch, "rating")
        history.append(loss)
        log.debug("rating MF epoch %d loss %.5f", epoch, loss)
    return history


class _NegativeSampler:
    def __init__(self, users, items, n_items, rng):
        self.n_items = n_items
        self.codes = np.unique(users * n_items + items)
        self.rng = rng

    def draw(self, users):
        neg = self.rng.integers(0, self.n_items, size=len(users))
        bad = self._seen(users, neg)
        while bad.any():
            neg[bad] = self.rng.integers(0, self.n_items, size=int(bad.sum()))
            bad[bad] = self._seen(users[bad], neg[bad])
        return neg

    def _seen(self, users, items):
        codes = users * self.n_items + items
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == codes


def train_ranking_mf(train: Dataset, config: MFConfig | None = None) -> FactorModel:
    """Implicit-feedback MF trained on (user, positive, sampled negative) triples."""
    cfg = config or MFConfig()
    users, items, _ = _encode(train)
    n_users, n_items = len(train.users), len(train.items)
    rng = np.random.default_rng(cfg.seed)
    params = _init_params(n_users, n_items, cfg, rng, 0.0)
    # Users who interacted with every item have no negatives to sample.
    per_user = np.bincount(users, minlength=n_users)
    ok = per_user[users] < n_items
    users, items = users[ok], items[ok]
    sampler = _NegativeSampler(users, items, n_items, rng)
    with np.errstate(over="ignore", invalid="ignore"):
        history = _fit_ranking(params, users, items, sampler, cfg, rng)
    return _to_model("ranking", train, params, cfg, history)


def _fit_ranking(params, users, items, sampler, cfg, rng):
    history = []
    for epoch in range(cfg.epochs):
        u = np.repeat(users, cfg.negatives)
        i = np.repeat(items, cfg.negatives)
        order = rng.permutation(len(u))
        u, i = u[order], i[order]
        j = sampler.draw(u)
        for start in range(0, len(u), cfg.batch_size):
            s = slice(start, start + cfg.batch_size)
            _step(params, _ranking_terms(params, u[s], i[s], j[s], cfg.regularization), cfg.learning_rate)
        loss = ranking_objective(params, u, i, j, cfg.regularization) / max(len(u), 1)
        _check_finite(loss, epoch, "ranking")
        history.append(loss)
        log.debug("ranking MF epoch %d loss %.5f", epoch, loss)
    return history


# -- inference ------------------------------------------------------------------------

def predict_rating(model: FactorModel, user: str, item: str) -> float:
    """Clamped rating prediction; unknown users or items drop their terms."""
    if model.kind != "rating":
        raise ValueError("predict_rating needs a rating-kind model")
    u = model.user_index.get(user)
    i = model.item_index.get(item)
    value = model.global_mean
    if u is not None:
        value += model.user_bias[u]
    if i is not None:
        value += model.item_bias[i]
    if u is not None and i is not None:
        value += float(model.user_factors[u] @ model.item_factors[i])
    return float(min(max(value, 1.0), float(model.scale_max)))


def score_items(model: FactorModel, user: str) -> np.ndarray:
    """Unclamped scores for every model item, aligned with ``model.item_ids``."""
    u = model.user_index.get(user)
    scores = model.item_bias.copy()
    if model.kind == "rating":
        scores += model.global_mean
    if u is not None:
        scores += model.item_factors @ model.user_factors[u]
        if model.kind == "rating":
            scores += model.user_bias[u]
    return scores


def score(model: FactorModel, user: str, item: str) -> float:
    i = model.item_index.get(item)
    if i is None:
        u = model.user_index.get(user)
        base = model.global_mean if model.kind == "rating" else 0.0
        if u is not None and model.kind == "rating":
            base += model.user_bias[u]
        return float(base)
    return float(score_items(model, user)[i])


def top_candidates(model: FactorModel, dataset: Dataset, user: str, k: int) -> CandidateList:
    """The ``k`` best-scoring items outside the user's train set (ties: item id ascending)."""
    if k < 1:
        raise ValueError("k' must be >= 1")
    scores = score_items(model, user)
    seen = {x.item_id for x in dataset.by_user.get(user, ())}
    keys = [id_key(it) for it in model.item_ids]
    eligible = [n for n, it in enumerate(model.item_ids) if it not in seen]
    eligible.sort(key=lambda n: (-scores[n], keys[n]))
    top = eligible[:k]
    return CandidateList(user, tuple(model.item_ids[n] for n in top), tuple(float(scores[n]) for n in top))


def user_embeddings(model: FactorModel) -> np.ndarray:
    return model.user_factors.copy()


# -- persistence -------------------------------------------------------------------------

def _fmt(values) -> str:
    return "\t".join(repr(float(v)) for v in values)


def save_model(path, model: FactorModel) -> None:
    """Text factor file: ``#key=value`` header, then one ``U``/``I`` row per entity."""
    lines = [
        MODEL_MAGIC,
        f"#kind={model.kind}",
        f"#d={model.d}",
        f"#users={len(model.user_ids)}",
        f"#items={len(model.item_ids)}",
        f"#seed={model.seed}",
        f"#scale_max={model.scale_max}",
        f"#global_mean={float(model.global_mean)!r}",
    ]
    for n, u in enumerate(model.user_ids):
        lines.append(f"U\t{u}\t{float(model.user_bias[n])!r}\t{_fmt(model.user_factors[n])}")
    for n, it in enumerate(model.item_ids):
        lines.append(f"I\t{it}\t{float(model.item_bias[n])!r}\t{_fmt(model.item_factors[n])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> FactorModel:
    header, rows = {}, {"U": [], "I": []}
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != MODEL_MAGIC:
            raise ParseError(f"{path}: not a factor model file")
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                header[k] = v
            elif line:
                kind, ident, bias, *vec = line.split("\t")
                rows[kind].append((ident, float(bias), [float(x) for x in vec]))
    d = int(header["d"])

    def block(rs):
        ids = tuple(r[0] for r in rs)
        bias = np.array([r[1] for r in rs], dtype=np.float64)
        mat = np.array([r[2] for r in rs], dtype=np.float64).reshape(len(rs), d)
        return ids, bias, mat

    uids, ub, uf = block(rows["U"])
    iids, ib, itf = block(rows["I"])
    return FactorModel(header["kind"], uids, iids, uf, itf, ub, ib, float(header["global_mean"]),
                       int(header["scale_max"]), int(header["seed"]))


def write_candidates(path, lists) -> None:
    lines = ["user\trank\titem\tscore"]
    for cl in lists:
        for m, (it, s) in enumerate(zip(cl.items, cl.scores), start=1):
            lines.append(f"{cl.user_id}\t{m}\t{it}\t{float(s)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_candidates(path) -> dict[str, CandidateList]:
    rows: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            user, m, item, s = line.rstrip("\n").split("\t")
            rows.setdefault(user, []).append((int(m), item, float(s)))
    out = {}
    for user, rs in rows.items():
        rs.sort()
        out[user] = CandidateList(user, tuple(r[1] for r in rs), tuple(r[2] for r in rs))
    return out
