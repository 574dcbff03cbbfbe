"""Leave-one-out top-k metrics (HR@k, NDCG@k) and rerank transition analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import MetricError


def rank_of_ground_truth(order, item) -> int | None:
    """1-based position of ``item`` in ``order``; None when absent."""
    for n, it in enumerate(order, start=1):
        if it == item:
            return n
    return None


def hit_ratio(ranks, k: int) -> float:
    ranks = list(ranks)
    if not ranks:
        raise MetricError("hit ratio of an empty population is undefined")
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def ndcg(ranks, k: int, literal: bool = False) -> float:
    """Mean of 1/log2(rank+1) over users whose held item ranks within k.

    ``literal=True`` evaluates the gain as (2**hit - 1) / log2(hit + 1), which
    is 1 for a hit and taken as 0 otherwise, i.e. it equals the hit ratio.
    """
    ranks = list(ranks)
    if not ranks:
        raise MetricError("NDCG of an empty population is undefined")
    total = 0.0
    for r in ranks:
        if r is not None and r <= k:
            total += 1.0 if literal else 1.0 / math.log2(r + 1)
    return total / len(ranks)


@dataclass
class MetricReport:
    ks: tuple
    hr: dict
    ndcg: dict
    users: int
    candidate_hit_rate: float
    hr_hit_subset: dict = field(default_factory=dict)
    ndcg_hit_subset: dict = field(default_factory=dict)

    def rows(self, prefix: str = "") -> list[tuple[str, float]]:
        out = [(f"{prefix}users", self.users), (f"{prefix}candidate_hit_rate", self.candidate_hit_rate)]
        for k in self.ks:
            out += [(f"{prefix}H@{k}", self.hr[k]), (f"{prefix}N@{k}", self.ndcg[k])]
        for k in self.ks:
            if k in self.hr_hit_subset:
                out += [(f"{prefix}H@{k}|hit", self.hr_hit_subset[k]),
                        (f"{prefix}N@{k}|hit", self.ndcg_hit_subset[k])]
        return out


def evaluate(orders: dict, held: dict, candidates: dict | None = None, ks=(3, 5),
             literal: bool = False) -> MetricReport:
    """Metrics over every user in ``held``; a user without an order counts as a miss.

    ``candidates`` (user -> retrieval list) defines the candidate-hit subset;
    it defaults to ``orders`` itself.
    """
    users = sorted(held)
    if not users:
        raise MetricError("no users to evaluate")
    candidates = candidates if candidates is not None else orders
    ranks = {u: rank_of_ground_truth(orders.get(u, ()), held[u]) for u in users}
    hit_users = [u for u in users if held[u] in set(candidates.get(u, ()))]
    report = MetricReport(
        ks=tuple(ks),
        hr={k: hit_ratio(ranks.values(), k) for k in ks},
        ndcg={k: ndcg(ranks.values(), k, literal) for k in ks},
        users=len(users),
        candidate_hit_rate=len(hit_users) / len(users),
    )
    if hit_users:
        sub = [ranks[u] for u in hit_users]
        report.hr_hit_subset = {k: hit_ratio(sub, k) for k in ks}
        report.ndcg_hit_subset = {k: ndcg(sub, k, literal) for k in ks}
    return report


@dataclass
class TransitionReport:
    k: int
    counts: dict

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict:
        n = self.total
        return {key: (c / n if n else 0.0) for key, c in self.counts.items()}


def transition_analysis(retrieval_orders: dict, reranked_orders: dict, held: dict, k: int) -> TransitionReport:
    """Classify users whose held item is among the retrieval candidates.

    "R" means the held item sits in the top k, "W" otherwise; the label is
    before-to-after, e.g. W2R for a miss turned into a hit.
    """
    counts = {"W2R": 0, "R2W": 0, "W2W": 0, "R2R": 0}
    for user in sorted(held):
        before = rank_of_ground_truth(retrieval_orders.get(user, ()), held[user])
        if before is None:
            continue
        after = rank_of_ground_truth(reranked_orders.get(user, ()), held[user])
        b = "R" if before <= k else "W"
        a = "R" if after is not None and after <= k else "W"
        counts[f"{b}2{a}"] += 1
    return TransitionReport(k, counts)


def improvement(base: float, new: float) -> float | None:
    """Relative gain in percent; None when the baseline is zero."""
    return None if base == 0 else 100.0 * (new - base) / base


def format_table(base: MetricReport, rerank: MetricReport, transitions: dict) -> str:
    lines = [f"users: {base.users}  candidate-hit rate: {base.candidate_hit_rate:.4f}", ""]
    lines.append(f"{'metric':<10}{'retrieval':>12}{'reranked':>12}{'improv.':>10}")
    for k in base.ks:
        for name, b, r in ((f"H@{k}", base.hr[k], rerank.hr[k]), (f"N@{k}", base.ndcg[k], rerank.ndcg[k])):
            imp = improvement(b, r)
            imp_s = "n/a" if imp is None else f"{imp:+.2f}%"
            lines.append(f"{name:<10}{b:>12.4f}{r:>12.4f}{imp_s:>10}")
    if base.hr_hit_subset:
        lines += ["", "candidate-hit subset:"]
        for k in base.ks:
            lines.append(f"{f'H@{k}':<10}{base.hr_hit_subset[k]:>12.4f}{rerank.hr_hit_subset[k]:>12.4f}")
            lines.append(f"{f'N@{k}':<10}{base.ndcg_hit_subset[k]:>12.4f}{rerank.ndcg_hit_subset[k]:>12.4f}")
    for k, tr in transitions.items():
        lines += ["", f"transitions @{k} over {tr.total} candidate-hit users:"]
        for key in ("W2R", "R2W", "W2W", "R2R"):
            lines.append(f"  {key}: {tr.counts[key]:>6}  ({tr.fractions[key]:.4f})")
    return "\n".join(lines) + "\n"
