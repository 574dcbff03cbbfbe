"""Adaptive user sampling and training-time candidate selection.

Three user multisets are produced: one drawn with probability proportional to
ln(interaction count), one proportional to the size of the user's k-means
cluster, and a final one drawn from their sum with weight C**multiplicity so
that users already drawn many times are less likely to be drawn again.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset, SplitDataset, id_key, is_liked
from .errors import ConfigError, ContractError, ParseError
from .seeds import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UserMultiset:
    multiplicity: dict  # user -> positive count

    def __post_init__(self):
        if any(int(c) < 1 for c in self.multiplicity.values()):
            raise ValueError("multiplicities must be >= 1")

    @classmethod
    def from_draws(cls, users) -> UserMultiset:
        return cls(dict(Counter(users)))

    @property
    def underlying(self) -> list[str]:
        return sorted(self.multiplicity, key=id_key)

    def __len__(self) -> int:
        return sum(self.multiplicity.values())

    def __add__(self, other: UserMultiset) -> UserMultiset:
        return multiset_sum(self, other)

    def occurrences(self) -> list[str]:
        """Every element repeated by its multiplicity, in id order."""
        return [u for u in self.underlying for _ in range(self.multiplicity[u])]


@dataclass
class SamplingConfig:
    n_target: int = 1000
    n_final: int | None = None
    clusters: int = 10
    penalty: float = 0.92
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.penalty < 1:
            raise ConfigError("penalty constant must lie in (0, 1)")
        if self.clusters < 1 or self.n_target < 1:
            raise ConfigError("clusters and n_target must be >= 1")


@dataclass(frozen=True)
class CandidateEntry:
    item_id: str
    label: str  # "liked" | "disliked" | "negative"
    rating: float | None = None
    timestamp: int | None = None


@dataclass(frozen=True)
class TrainingCandidateSet:
    user_id: str
    entries: tuple


def multiset_sum(a: UserMultiset, b: UserMultiset) -> UserMultiset:
    total = Counter(a.multiplicity)
    total.update(b.multiplicity)
    return UserMultiset(dict(total))


def _draw(users: list[str], probs: np.ndarray, n: int, seed: int) -> UserMultiset:
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(users), size=n, replace=True, p=probs)
    return UserMultiset.from_draws(users[i] for i in picks)


def importance_weights(train: Dataset) -> dict[str, float]:
    """ln(interaction count) per user; users with a single interaction are dropped."""
    weights = {}
    dropped = 0
    for u in train.users:
        q = len(train.by_user[u])
        if q <= 1:
            dropped += 1
            continue
        weights[u] = math.log(q)
    if dropped:
        log.warning("importance weights: excluded %d users with <= 1 interaction", dropped)
    return weights


def importance_probabilities(train: Dataset) -> dict[str, float]:
    w = importance_weights(train)
    total = sum(w.values())
    return {u: x / total for u, x in w.items()}


def importance_sampling(train: Dataset, n_target: int, seed: int) -> UserMultiset:
    probs = importance_probabilities(train)
    users = sorted(probs, key=id_key)
    return _draw(users, np.array([probs[u] for u in users]), n_target, seed)


def cluster_users(embeddings: np.ndarray, K: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """K-means with farthest-point seeding; returns one cluster id per row.

    The first center is a random row; each further center is the row farthest
    from its nearest chosen center. Lloyd iterations run until the assignment
    stops changing or ``max_iter`` is reached. An emptied cluster is re-seeded
    with the member of the largest cluster farthest from that cluster's center.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n = len(X)
    if K < 1 or K > n:
        raise ConfigError(f"cannot form {K} clusters from {n} users")
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    nearest = ((X - X[centers[0]]) ** 2).sum(axis=1)
    while len(centers) < K:
        nearest_masked = nearest.copy()
        nearest_masked[centers] = -1.0
        nxt = int(np.argmax(nearest_masked))
        centers.append(nxt)
        nearest = np.minimum(nearest, ((X - X[nxt]) ** 2).sum(axis=1))
    C = X[centers].copy()
    assign = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        new = _repair_empty(X, new, C, K)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            C[k] = X[assign == k].mean(axis=0)
    return assign


def _repair_empty(X, assign, C, K):
    assign = assign.copy()
    for k in range(K):
        if (assign == k).any():
            continue
        sizes = np.bincount(assign, minlength=K)
        big = int(np.argmax(sizes))
        members = np.flatnonzero(assign == big)
        far = members[np.argmax(((X[members] - C[big]) ** 2).sum(axis=1))]
        assign[far] = k
        C[k] = X[far]
    return assign


def clustering_probabilities(assignments: dict) -> dict[str, float]:
    """p_u proportional to the size of u's cluster, normalized over all users."""
    sizes = Counter(assignments.values())
    total = sum(sizes[c] for c in assignments.values())
    return {u: sizes[c] / total for u, c in assignments.items()}


def clustering_sampling(assignments: dict, n_target: int, seed: int) -> UserMultiset:
    probs = clustering_probabilities(assignments)
    users = sorted(probs, key=id_key)
    return _draw(users, np.array([probs[u] for u in users]), n_target, seed)


def penalty_probabilities(combined: UserMultiset, C: float) -> dict[str, float]:
    """C**M(u) over the underlying set, normalized; fixed for all draws."""
    if not 0 < C < 1:
        raise ConfigError("penalty constant must lie in (0, 1)")
    users = combined.underlying
    # Shift exponents by the minimum multiplicity; the common factor cancels
    # and large multiplicities no longer underflow.
    low = min(combined.multiplicity.values())
    psi = {u: C ** (combined.multiplicity[u] - low) for u in users}
    total = sum(psi.values())
    return {u: psi[u] / total for u in users}


def penalty_resampling(combined: UserMultiset, n_final: int, C: float, seed: int) -> UserMultiset:
    probs = penalty_probabilities(combined, C)
    users = list(probs)
    return _draw(users, np.array([probs[u] for u in users]), n_final, seed)


def adaptive_sampling(train: Dataset, embeddings: np.ndarray, config: SamplingConfig):
    """Run the three sampling stages; returns (U1, U2, U3, U_ins)."""
    u1 = importance_sampling(train, config.n_target, derive_seed(config.seed, "importance"))
    labels = cluster_users(embeddings, config.clusters, derive_seed(config.seed, "kmeans"))
    assignments = {u: int(labels[n]) for n, u in enumerate(train.users)}
    u2 = clustering_sampling(assignments, config.n_target, derive_seed(config.seed, "clustering"))
    u3 = u1 + u2
    n_final = config.n_final or config.n_target
    u_ins = penalty_resampling(u3, n_final, config.penalty, derive_seed(config.seed, "penalty"))
    return u1, u2, u3, u_ins


# -- training candidates ------------------------------------------------------------

DEFAULT_COMPOSITION = (3, 3, 4)


def select_training_candidates(
    split: SplitDataset,
    user: str,
    k: int = 10,
    composition: tuple = DEFAULT_COMPOSITION,
    seed: int = 0,
    exclude: frozenset = frozenset(),
) -> TrainingCandidateSet:
    """Draw liked, disliked and never-interacted items for one user.

    ``composition`` gives (liked, disliked, negative) counts summing to ``k``;
    a shortfall of liked or disliked items is filled with extra negatives.
    Negatives never include items the user interacted with in any split.
    """
    if sum(composition) != k:
        raise ConfigError(f"composition {composition} does not sum to k'={k}")
    history = split.train.by_user.get(user)
    if not history:
        raise KeyError(f"unknown user {user!r}")
    rng = np.random.default_rng(seed)
    scale = split.scale_max
    liked = [x for x in history if is_liked(x.rating, scale) and x.item_id not in exclude]
    disliked = [x for x in history if not is_liked(x.rating, scale) and x.item_id not in exclude]
    n_like = min(composition[0], len(liked))
    n_dis = min(composition[1], len(disliked))
    n_neg = k - n_like - n_dis

    touched = set(split.train_items_by_user[user])
    for held in (split.validation, split.test):
        if user in held:
            touched.add(held[user].item_id)
    pool = [it for it in split.train.items if it not in touched]
    if len(pool) < n_neg:
        raise ContractError(f"user {user!r} has only {len(pool)} eligible negatives, needs {n_neg}")

    entries = []
    for label, group, n in (("liked", liked, n_like), ("disliked", disliked, n_dis)):
        for idx in sorted(rng.choice(len(group), size=n, replace=False)):
            x = group[idx]
            entries.append(CandidateEntry(x.item_id, label, x.rating, x.timestamp))
    for idx in sorted(rng.choice(len(pool), size=n_neg, replace=False)):
        entries.append(CandidateEntry(pool[idx], "negative"))
    return TrainingCandidateSet(user, tuple(entries))


# -- export ----------------------------------------------------------------------------

def write_multiset(path, ms: UserMultiset) -> None:
    lines = ["user\tmultiplicity"] + [f"{u}\t{ms.multiplicity[u]}" for u in ms.underlying]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_multiset(path) -> UserMultiset:
    counts = {}
    with open(path, encoding="utf-8") as fh:
        if next(fh).rstrip("\n") != "user\tmultiplicity":
            raise ParseError(f"{path}: missing multiset header")
        for line in fh:
            user, count = line.rstrip("\n").split("\t")
            counts[user] = int(count)
    return UserMultiset(counts)


def sampling_report(ms: UserMultiset) -> dict:
    """Entropy (nats) of the empirical user distribution, distinct count, max multiplicity."""
    total = len(ms)
    probs = np.array([c / total for c in ms.multiplicity.values()])
    return {
        "size": total,
        "distinct": len(ms.multiplicity),
        "max_multiplicity": max(ms.multiplicity.values()),
        "entropy": float(-(probs * np.log(probs)).sum()),
    }


def format_report(reports: dict) -> str:
    lines = []
    for name, rep in reports.items():
        lines.append(f"[{name}]")
        for key, value in rep.items():
            lines.append(f"{key} = {value:.6f}" if isinstance(value, float) else f"{key} = {value}")
    return "\n".join(lines) + "\n"
