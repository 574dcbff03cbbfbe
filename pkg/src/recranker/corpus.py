"""Rating corpora: parsing, k-core filtering, leave-one-out splits, persistence."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigError, EmptyCorpusError, ParseError, ValidationError

log = logging.getLogger(__name__)

FORMATS = ("tsv", "dcolon", "delimited")
DATASET_MAGIC = "#recranker-dataset v1"
SPLIT_MAGIC = "#recranker-split v1"


class Interaction(NamedTuple):
    user_id: str
    item_id: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    title: str
    attributes: dict = field(default_factory=dict)


def id_key(x: str):
    """Sort key for opaque ids: numeric ids compare numerically, before text ids."""
    return (0, int(x), "") if x.isdigit() else (1, 0, x)


def liked_threshold(scale_max: int) -> int:
    """Lowest rating counted as "liked": 4 on a 1-5 scale, 7 on a 1-10 scale."""
    return -(-7 * scale_max // 10)


def is_liked(rating: float, scale_max: int) -> bool:
    return rating >= liked_threshold(scale_max)


def format_rating(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


@dataclass(frozen=True)
class Dataset:
    interactions: tuple
    catalog: dict
    scale_max: int = 5
    seed: int | None = None

    @cached_property
    def users(self) -> list[str]:
        return sorted({x.user_id for x in self.interactions}, key=id_key)

    @cached_property
    def items(self) -> list[str]:
        return sorted({x.item_id for x in self.interactions}, key=id_key)

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.items)}

    @cached_property
    def by_user(self) -> dict[str, list[Interaction]]:
        """Per-user interactions in chronological order (ties: item id descending)."""
        groups = defaultdict(list)
        for x in self.interactions:
            groups[x.user_id].append(x)
        return {u: _chronological(xs) for u, xs in groups.items()}

    @cached_property
    def display_titles(self) -> dict[str, str]:
        # Titles must be unique inside prompts so responses can be mapped back.
        counts = Counter(m.title for m in self.catalog.values())
        return {
            i: f"{m.title} [#{i}]" if counts[m.title] > 1 else m.title
            for i, m in self.catalog.items()
        }

    def title(self, item_id: str) -> str:
        return self.display_titles.get(item_id) or f"Item {item_id}"

    @property
    def density(self) -> float:
        return len(self.interactions) / (len(self.users) * len(self.items))

    def stats(self) -> dict:
        return {
            "users": len(self.users),
            "items": len(self.items),
            "ratings": len(self.interactions),
            "density": self.density,
        }


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    validation: dict
    test: dict
    skipped_users: int = 0

    @property
    def scale_max(self) -> int:
        return self.train.scale_max

    def title(self, item_id: str) -> str:
        return self.train.title(item_id)

    @cached_property
    def train_items_by_user(self) -> dict[str, frozenset]:
        return {u: frozenset(x.item_id for x in xs) for u, xs in self.train.by_user.items()}

    @cached_property
    def all_items(self) -> list[str]:
        items = set(self.train.items)
        items.update(x.item_id for x in self.validation.values())
        items.update(x.item_id for x in self.test.values())
        return sorted(items, key=id_key)


def _chronological(xs: Iterable[Interaction]) -> list[Interaction]:
    xs = sorted(xs, key=lambda x: id_key(x.item_id), reverse=True)
    return sorted(xs, key=lambda x: x.timestamp)


def _split_line(line: str, fmt: str, delimiter: str | None) -> list[str]:
    if fmt == "tsv":
        return line.split("\t")
    if fmt == "dcolon":
        return line.split("::")
    return next(csv.reader([line], delimiter=delimiter or ","))


def parse_interactions(
    path,
    fmt: str = "tsv",
    scale_max: int = 5,
    delimiter: str | None = None,
    skip_header: bool = False,
    synthetic_timestamps: bool = False,
    seed: int = 0,
    encoding: str = "utf-8",
) -> list[Interaction]:
    """Read (user, item, rating, timestamp) lines.

    With ``synthetic_timestamps`` the file carries only (user, item, rating) and
    timestamps are drawn uniformly under ``seed`` in line order. Duplicate
    (user, item) pairs keep the latest record (the later line on equal times).
    """
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    n_fields = 3 if synthetic_timestamps else 4
    rng = np.random.default_rng(seed)
    latest: dict[tuple[str, str], Interaction] = {}
    with open(path, encoding=encoding, errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if (skip_header and lineno == 1) or not line.strip():
                continue
            parts = [p.strip() for p in _split_line(line, fmt, delimiter)]
            if len(parts) != n_fields:
                raise ParseError(f"{path}:{lineno}: expected {n_fields} fields, got {len(parts)}")
            try:
                rating = float(parts[2])
                if synthetic_timestamps:
                    ts = int(rng.integers(0, 2**31 - 1))
                else:
                    ts = int(parts[3])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not (1 <= rating <= scale_max) or math.isnan(rating):
                raise ValidationError(f"{path}:{lineno}: rating {parts[2]} outside [1, {scale_max}]")
            x = Interaction(parts[0], parts[1], rating, ts)
            prev = latest.get((x.user_id, x.item_id))
            if prev is None or x.timestamp >= prev.timestamp:
                latest[(x.user_id, x.item_id)] = x
    return list(latest.values())


def parse_catalog(
    path,
    delimiter: str = "|",
    encoding: str = "latin-1",
    skip_header: bool = False,
    attribute_names: list[str] | None = None,
) -> dict[str, ItemMeta]:
    """Read an item catalog whose first two fields are id and title."""
    catalog = {}
    with open(path, encoding=encoding, errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if (skip_header and lineno == 1) or not line.strip():
                continue
            if delimiter in (",", ";"):
                parts = next(csv.reader([line], delimiter=delimiter))
            else:
                parts = line.split(delimiter)
            if len(parts) < 2:
                raise ParseError(f"{path}:{lineno}: expected id and title")
            attrs = {}
            for name, value in zip(attribute_names or [], parts[2:]):
                attrs[name] = value.strip()
            item_id = parts[0].strip()
            catalog[item_id] = ItemMeta(item_id, parts[1].strip(), attrs)
    return catalog


def build_dataset(interactions, catalog=None, scale_max=5, seed=None) -> Dataset:
    """Assemble a Dataset, giving every referenced item a catalog entry."""
    catalog = dict(catalog or {})
    for x in interactions:
        if x.item_id not in catalog:
            catalog[x.item_id] = ItemMeta(x.item_id, f"Item {x.item_id}")
    ordered = sorted(interactions, key=lambda x: (id_key(x.user_id), x.timestamp, id_key(x.item_id)))
    used = {x.item_id for x in ordered}
    catalog = {k: catalog[k] for k in sorted(used, key=id_key)}
    return Dataset(tuple(ordered), catalog, scale_max, seed)


def apply_k_core(interactions, k: int) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(interactions)
    while True:
        users = Counter(x.user_id for x in current)
        items = Counter(x.item_id for x in current)
        kept = [x for x in current if users[x.user_id] >= k and items[x.item_id] >= k]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise EmptyCorpusError(f"corpus emptied by k-core (k={k})")
    return current


def leave_one_out_split(dataset: Dataset) -> SplitDataset:
    """Latest interaction -> test, second latest -> validation, rest -> train.

    Users with fewer than three interactions are skipped and counted.
    """
    train, validation, test = [], {}, {}
    skipped = 0
    for user in dataset.users:
        seq = dataset.by_user[user]
        if len(seq) < 3:
            skipped += 1
            continue
        train.extend(seq[:-2])
        validation[user] = seq[-2]
        test[user] = seq[-1]
    if skipped:
        log.warning("leave-one-out: skipped %d users with fewer than 3 interactions", skipped)
    if not train:
        raise EmptyCorpusError("no user has 3 or more interactions")
    train_ds = build_dataset(train, dataset.catalog, dataset.scale_max, dataset.seed)
    # Keep catalog entries for held-out items too.
    catalog = dict(train_ds.catalog)
    for x in [*validation.values(), *test.values()]:
        catalog.setdefault(x.item_id, dataset.catalog[x.item_id])
    train_ds = Dataset(train_ds.interactions, catalog, train_ds.scale_max, train_ds.seed)
    return SplitDataset(train_ds, validation, test, skipped)


def user_history(split: SplitDataset, user: str) -> list[Interaction]:
    """Train interactions of ``user`` in ascending timestamp order."""
    try:
        return list(split.train.by_user[user])
    except KeyError:
        raise KeyError(f"unknown user {user!r}") from None


# -- persistence -------------------------------------------------------------

def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ")


def _header(magic: str, fields: dict) -> list[str]:
    return [magic] + [f"#{k}={v}" for k, v in fields.items()]


def _catalog_lines(catalog: dict) -> list[str]:
    return [
        f"item\t{m.item_id}\t{_clean(m.title)}\t{json.dumps(m.attributes, sort_keys=True)}"
        for m in (catalog[k] for k in sorted(catalog, key=id_key))
    ]


def _row(kind: str, x: Interaction) -> str:
    return f"{kind}\t{x.user_id}\t{x.item_id}\t{format_rating(x.rating)}\t{x.timestamp}"


def write_dataset(path, dataset: Dataset) -> None:
    """Write a dataset as tab-separated ``item``/``rating`` records under a ``#key=value`` header."""
    stats = dataset.stats()
    lines = _header(DATASET_MAGIC, {
        "scale_max": dataset.scale_max,
        "seed": dataset.seed,
        "users": stats["users"],
        "items": stats["items"],
        "interactions": stats["ratings"],
    })
    lines += _catalog_lines(dataset.catalog)
    lines += [_row("rating", x) for x in dataset.interactions]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_split(path, split: SplitDataset) -> None:
    train = split.train
    lines = _header(SPLIT_MAGIC, {
        "scale_max": train.scale_max,
        "seed": train.seed,
        "users": len(train.users),
        "items": len(split.all_items),
        "train": len(train.interactions),
        "validation": len(split.validation),
        "test": len(split.test),
        "skipped_users": split.skipped_users,
    })
    lines += _catalog_lines(train.catalog)
    lines += [_row("train", x) for x in train.interactions]
    for kind, held in (("valid", split.validation), ("test", split.test)):
        lines += [_row(kind, held[u]) for u in sorted(held, key=id_key)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_records(path, magic: str):
    header, catalog, rows = {}, {}, defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != magic:
            raise ParseError(f"{path}: not a {magic[1:]} file")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                header[key] = value
                continue
            parts = line.split("\t")
            if parts[0] == "item" and len(parts) == 4:
                catalog[parts[1]] = ItemMeta(parts[1], parts[2], json.loads(parts[3]))
            elif len(parts) == 5:
                rows[parts[0]].append(Interaction(parts[1], parts[2], float(parts[3]), int(parts[4])))
            else:
                raise ParseError(f"{path}:{lineno}: malformed record")
    seed = header.get("seed")
    seed = None if seed in (None, "None") else int(seed)
    return header, catalog, rows, int(header["scale_max"]), seed


def read_dataset(path) -> Dataset:
    _, catalog, rows, scale_max, seed = _read_records(path, DATASET_MAGIC)
    return Dataset(tuple(rows["rating"]), catalog, scale_max, seed)


def read_split(path) -> SplitDataset:
    header, catalog, rows, scale_max, seed = _read_records(path, SPLIT_MAGIC)
    train = Dataset(tuple(rows["train"]), catalog, scale_max, seed)
    validation = {x.user_id: x for x in rows["valid"]}
    test = {x.user_id: x for x in rows["test"]}
    return SplitDataset(train, validation, test, int(header.get("skipped_users", 0)))


# -- synthetic corpora ---------------------------------------------------------

_ADJECTIVES = (
    "Silent Crimson Hidden Golden Broken Distant Frozen Wild Lonely Burning Secret Electric "
    "Forgotten Midnight Velvet Savage Gentle Iron Paper Hollow Restless Silver Bitter Northern"
).split()
_NOUNS = (
    "River Garden Empire Harbor Signal Orchard Mirror Voyage Lantern Kingdom Canyon Letter "
    "Machine Island Promise Frontier Circus Engine Meadow Tower Station Whisper Comet Archive"
).split()


def synthetic_titles(n: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    titles, seen = [], set()
    while len(titles) < n:
        a = _ADJECTIVES[rng.integers(len(_ADJECTIVES))]
        b = _NOUNS[rng.integers(len(_NOUNS))]
        year = int(rng.integers(1950, 2020))
        t = f"The {a} {b} ({year})"
        if t not in seen:
            seen.add(t)
            titles.append(t)
    return titles


def make_synthetic_dataset(
    n_users: int = 500,
    n_items: int = 300,
    n_groups: int = 6,
    min_per_user: int = 20,
    max_per_user: int = 40,
    in_group: float = 0.85,
    scale_max: int = 5,
    seed: int = 0,
) -> Dataset:
    """Clustered taste corpus: users mostly rate, and like, items of their own group."""
    rng = np.random.default_rng(seed)
    item_group = np.arange(n_items) % n_groups
    quality = rng.normal(0.0, 0.5, n_items)
    popularity = rng.pareto(1.5, n_items) + 1.0
    titles = synthetic_titles(n_items, seed)
    catalog = {
        str(i + 1): ItemMeta(str(i + 1), titles[i], {"genre": f"genre-{item_group[i]}"})
        for i in range(n_items)
    }
    out = []
    for u in range(n_users):
        g = int(rng.integers(n_groups))
        n = int(rng.integers(min_per_user, max_per_user + 1))
        w = popularity * np.where(item_group == g, in_group / (item_group == g).sum(),
                                  (1 - in_group) / (item_group != g).sum())
        chosen = rng.choice(n_items, size=min(n, n_items), replace=False, p=w / w.sum())
        times = np.sort(rng.integers(10**8, 2 * 10**8, size=len(chosen)))
        for t, i in zip(times, rng.permutation(chosen)):
            base = 3.6 + (0.9 if item_group[i] == g else -1.2) + quality[i]
            r = int(np.clip(np.rint(base + rng.normal(0.0, 0.6)), 1, scale_max))
            out.append(Interaction(str(u + 1), str(i + 1), float(r), int(t)))
    return build_dataset(out, catalog, scale_max, seed)
