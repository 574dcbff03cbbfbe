"""Hybrid reranking: LLM judgments -> per-item utilities -> fused ordering."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import id_key
from .errors import ConfigError
from .gateway import Gateway, parse_listwise, parse_pairwise, parse_pointwise
from .prompting import PromptBuilder, RankingTask
from .retrieval import CandidateList
from .seeds import derive_seed

log = logging.getLogger(__name__)

MODES = ("pointwise", "pairwise", "listwise", "hybrid")
# Utilities are rounded before sorting so that mathematically equal scores
# tie exactly and fall back to retrieval order.
_TIE_DECIMALS = 9


@dataclass
class RerankConfig:
    k: int = 5
    candidates: int = 10
    c1: float = 0.05
    c2: float = 0.5
    c3: float = 0.025
    alpha: tuple = (1 / 3, 1 / 3, 1 / 3)
    mode: str = "hybrid"
    listwise_shuffles: int = 2
    seed: int = 0

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 1 <= self.k < self.candidates:
            raise ConfigError("need 1 <= k < k'")
        if min(self.c1, self.c2, self.c3) < 0 or min(self.alpha) < 0:
            raise ConfigError("constants and weights must be non-negative")
        if len(self.alpha) != 3 or abs(sum(self.alpha) - 1.0) > 1e-9:
            raise ConfigError("alpha must hold three weights summing to 1")
        if self.listwise_shuffles < 1:
            raise ConfigError("listwise_shuffles must be >= 1")

    def expected_calls(self, n_candidates: int | None = None) -> int:
        n = self.candidates if n_candidates is None else n_candidates
        return {
            "pointwise": n,
            "pairwise": 2 * self.k,
            "listwise": self.listwise_shuffles,
            "hybrid": n + 2 * self.k + self.listwise_shuffles,
        }[self.mode]


@dataclass
class UtilityVector:
    item_id: str
    position: int
    u_retrieval: float
    u_pointwise: float | None = None
    u_pairwise: float = 0.0
    u_listwise: float | None = None
    u_hybrid: float = 0.0


@dataclass
class RerankResult:
    user_id: str
    final_order: tuple
    k: int
    call_count: int = 0
    parse_failures: int = 0
    degraded: bool = False
    vectors: list = field(default_factory=list, repr=False)

    @property
    def top_k(self) -> tuple:
        return self.final_order[: self.k]


def retrieval_utility(m: int, c1: float) -> float:
    """-m * c1 for the 1-based retrieval position m."""
    return -m * c1


def pointwise_utilities(user, candidates, gateway: Gateway, builder: PromptBuilder, c1: float,
                        scale_max: int, seed: int = 0):
    """Returns ({item: u_pointwise or None}, parse_failures, transport_failures)."""
    items = list(candidates)
    prompts = [
        builder.build(RankingTask.POINTWISE, user, [it], shuffle_seed=derive_seed(seed, "point", it))
        for it in items
    ]
    out, bad, lost = {}, 0, 0
    for m, (it, res) in enumerate(zip(items, gateway.complete_many(prompts)), start=1):
        rating = None
        if isinstance(res, Exception):
            lost += 1
        else:
            rating = parse_pointwise(res, scale_max)
            bad += rating is None
        out[it] = None if rating is None else retrieval_utility(m, c1) + rating
    return out, bad, lost


def pairwise_pairs(candidates, k: int, seed: int) -> list[tuple]:
    """k pairs, each joining one top-k candidate with one candidate after position k.

    When there are at least k trailing candidates the pairs are a random
    matching (disjoint); otherwise trailing candidates are reused as evenly as
    possible.
    """
    items = list(candidates)
    if len(items) <= k:
        raise ConfigError(f"need more than k={k} candidates for pairwise ranking")
    head, tail = items[:k], items[k:]
    rng = np.random.default_rng(seed)
    if len(tail) >= k:
        partners = [tail[i] for i in rng.permutation(len(tail))[:k]]
    else:
        reps = -(-k // len(tail))
        pool = [tail[i] for _ in range(reps) for i in rng.permutation(len(tail))][:k]
        partners = [pool[i] for i in rng.permutation(k)]
    heads = [head[i] for i in rng.permutation(k)]
    return list(zip(heads, partners))


def pairwise_utilities(user, pairs, gateway: Gateway, builder: PromptBuilder, c2: float, seed: int = 0):
    """Ask each pair in both presentation orders; only an agreeing winner earns c2.

    Returns ({item: u_pairwise}, parse_failures, transport_failures).
    """
    prompts = []
    for a, b in pairs:
        s = derive_seed(seed, "pair", a, b)
        prompts.append(builder.build(RankingTask.PAIRWISE, user, [a, b], shuffle_seed=s, shift=False))
        prompts.append(builder.build(RankingTask.PAIRWISE, user, [b, a], shuffle_seed=s, shift=False))
    results = gateway.complete_many(prompts)
    util = {it: 0.0 for pair in pairs for it in pair}
    bad = lost = 0
    for n, (a, b) in enumerate(pairs):
        winners = []
        for prompt, res in zip(prompts[2 * n: 2 * n + 2], results[2 * n: 2 * n + 2]):
            if isinstance(res, Exception):
                lost += 1
                winners.append(None)
                continue
            first, second = prompt.presented_items
            titles = [builder.split.title(first), builder.split.title(second)]
            side = parse_pairwise(res, titles)
            bad += side is None
            winners.append({"first": first, "second": second}.get(side))
        if winners[0] is not None and winners[0] == winners[1]:
            util[winners[0]] += c2
    return util, bad, lost


def listwise_utilities(user, candidates, gateway: Gateway, builder: PromptBuilder, c3: float,
                       shuffles: int, seed: int = 0):
    """Mean of -m' * c3 over shuffled presentations with a valid parse.

    Returns ({item: u_listwise or None}, parse_failures, transport_failures).
    """
    items = list(candidates)
    prompts = [
        builder.build(RankingTask.LISTWISE, user, items, shuffle_seed=derive_seed(seed, "list", s))
        for s in range(shuffles)
    ]
    totals = dict.fromkeys(items, 0.0)
    valid = bad = lost = 0
    retrieval_rank = {it: n for n, it in enumerate(items)}
    for prompt, res in zip(prompts, gateway.complete_many(prompts)):
        if isinstance(res, Exception):
            lost += 1
            continue
        presented = list(prompt.presented_items)
        fallback = sorted(range(len(presented)), key=lambda n: retrieval_rank[presented[n]])
        perm = parse_listwise(res, [builder.split.title(i) for i in presented], fallback)
        if perm is None:
            bad += 1
            continue
        valid += 1
        for pos, idx in enumerate(perm, start=1):
            totals[presented[idx]] += -pos * c3
    if not valid:
        return dict.fromkeys(items), bad, lost
    return {it: totals[it] / valid for it in items}, bad, lost


def hybrid_combine(vectors, config: RerankConfig) -> list[UtilityVector]:
    """Fill ``u_hybrid`` on every vector according to the mode.

    Missing pointwise utilities fall back to the retrieval utility and missing
    listwise utilities to 0. Single-task modes copy that task's utility.
    """
    a1, a2, a3 = config.alpha
    for v in vectors:
        point = v.u_pointwise if v.u_pointwise is not None else v.u_retrieval
        lst = v.u_listwise if v.u_listwise is not None else 0.0
        if config.mode == "pointwise":
            v.u_hybrid = point
        elif config.mode == "pairwise":
            v.u_hybrid = v.u_pairwise
        elif config.mode == "listwise":
            v.u_hybrid = lst
        else:
            v.u_hybrid = a1 * point + a2 * v.u_pairwise + a3 * lst
    return vectors


def order_by_utility(vectors) -> list[str]:
    """Descending hybrid utility; equal utilities keep retrieval order."""
    ranked = sorted(vectors, key=lambda v: (-round(v.u_hybrid, _TIE_DECIMALS), v.position))
    return [v.item_id for v in ranked]


class _UserCalls:
    """Per-user view of a shared gateway that counts this user's calls only."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.calls = 0

    def complete_many(self, prompts):
        prompts = list(prompts)
        self.calls += len(prompts)
        return self.gateway.complete_many(prompts)


def rerank_user(user, candidate_list: CandidateList, gateway: Gateway, config: RerankConfig,
                builder: PromptBuilder) -> RerankResult:
    items = list(candidate_list.items)
    gateway = _UserCalls(gateway)
    seed = derive_seed(config.seed, "rerank", user)
    vectors = [UtilityVector(it, m, retrieval_utility(m, config.c1)) for m, it in enumerate(items, start=1)]
    by_item = {v.item_id: v for v in vectors}
    bad = lost = 0
    mode = config.mode
    if len(items) < 2:
        return RerankResult(user, tuple(items), config.k, degraded=True, vectors=vectors)
    if mode in ("pointwise", "hybrid"):
        util, b, l_ = pointwise_utilities(user, items, gateway, builder, config.c1,
                                          builder.split.scale_max, seed)
        bad, lost = bad + b, lost + l_
        for it, u in util.items():
            by_item[it].u_pointwise = u
    if mode in ("pairwise", "hybrid") and len(items) > config.k:
        pairs = pairwise_pairs(items, config.k, derive_seed(seed, "pairs"))
        util, b, l_ = pairwise_utilities(user, pairs, gateway, builder, config.c2, seed)
        bad, lost = bad + b, lost + l_
        for it, u in util.items():
            by_item[it].u_pairwise = u
    if mode in ("listwise", "hybrid"):
        util, b, l_ = listwise_utilities(user, items, gateway, builder, config.c3,
                                         config.listwise_shuffles, seed)
        bad, lost = bad + b, lost + l_
        for it, u in util.items():
            by_item[it].u_listwise = u
    calls = gateway.calls
    if calls and lost == calls:
        log.warning("user %s: every gateway call failed; keeping retrieval order", user)
        return RerankResult(user, tuple(items), config.k, calls, bad, True, vectors)
    hybrid_combine(vectors, config)
    return RerankResult(user, tuple(order_by_utility(vectors)), config.k, calls, bad, False, vectors)


def _fmt(x) -> str:
    return "NA" if x is None else repr(float(x))


def write_results(path, results) -> None:
    lines = ["user\trank\titem"]
    for r in sorted(results, key=lambda r: id_key(r.user_id)):
        lines += [f"{r.user_id}\t{n}\t{it}" for n, it in enumerate(r.final_order, start=1)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results(path) -> dict[str, list[str]]:
    rows: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            user, rank, item = line.rstrip("\n").split("\t")
            rows.setdefault(user, []).append((int(rank), item))
    return {u: [it for _, it in sorted(rs)] for u, rs in rows.items()}


def write_utilities(path, results) -> None:
    lines = ["user\titem\tm\tu_retrieval\tu_point\tu_pair\tu_list\tu_hybrid"]
    for r in sorted(results, key=lambda r: id_key(r.user_id)):
        for v in r.vectors:
            lines.append("\t".join([
                r.user_id, v.item_id, str(v.position), _fmt(v.u_retrieval), _fmt(v.u_pointwise),
                _fmt(v.u_pairwise), _fmt(v.u_listwise), _fmt(v.u_hybrid),
            ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
