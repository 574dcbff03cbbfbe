import pytest

from recranker.corpus import Interaction, ItemMeta, build_dataset, leave_one_out_split, make_synthetic_dataset
from recranker.retrieval import MFConfig, train_ranking_mf, train_rating_mf


def make_split(rows, titles=None, scale_max=5):
    """Split from (user, item, rating, timestamp) tuples; titles default to 'Title <item>'."""
    xs = [Interaction(str(u), str(i), float(r), int(t)) for u, i, r, t in rows]
    items = {x.item_id for x in xs}
    titles = titles or {}
    catalog = {i: ItemMeta(i, titles.get(i, f"Title {i}")) for i in items}
    return leave_one_out_split(build_dataset(xs, catalog, scale_max))


@pytest.fixture(scope="session")
def small_corpus():
    return make_synthetic_dataset(n_users=60, n_items=80, n_groups=4, min_per_user=12, max_per_user=25, seed=3)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return leave_one_out_split(small_corpus)


@pytest.fixture(scope="session")
def small_models(small_split):
    cfg = MFConfig(d=16, epochs=10, seed=1)
    return train_rating_mf(small_split.train, cfg), train_ranking_mf(small_split.train, cfg)


class ScriptedBackend:
    """Answers through ``fn(prompt)``; logs every prompt it sees."""

    def __init__(self, fn):
        self.fn = fn
        self.log = []

    def complete(self, prompt, params):
        self.log.append(prompt)
        return self.fn(prompt)


def rerank_split(n_candidates=10):
    """User "u" with a short history plus candidate items c1..cN titled "Film cN"."""
    rows = [("u", f"h{n}", 5 if n % 2 else 2, n) for n in range(4)] + [("u", "val", 4, 10), ("u", "held", 4, 11)]
    rows += [("x", f"c{n}", 3, n) for n in range(1, n_candidates + 1)] + [("x", "v2", 3, 90), ("x", "t2", 3, 91)]
    titles = {f"c{n}": f"Film c{n}" for n in range(1, n_candidates + 1)}
    return make_split(rows, titles)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
