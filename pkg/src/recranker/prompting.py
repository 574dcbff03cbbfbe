"""Prompt rendering for pointwise/pairwise/listwise ranking and instruction-dataset assembly."""
from __future__ import annotations

import configparser
import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import SplitDataset, format_rating, is_liked
from .errors import ContractError, ParseError
from .retrieval import FactorModel, predict_rating, score
from .sampling import (
    DEFAULT_COMPOSITION,
    CandidateEntry,
    UserMultiset,
    select_training_candidates,
)
from .seeds import derive_seed

log = logging.getLogger(__name__)

LIST_SEP = "; "


class RankingTask(str, enum.Enum):
    POINTWISE = "pointwise"
    PAIRWISE = "pairwise"
    LISTWISE = "listwise"


TASKS = tuple(RankingTask)


class Templates:
    """Named prompt templates read from an INI-style text file."""

    def __init__(self, sections: dict):
        self.sections = sections

    @classmethod
    def load(cls, path=None) -> Templates:
        parser = configparser.ConfigParser(interpolation=None)
        if path is None:
            parser.read_string(resources.files("recranker").joinpath("templates.ini").read_text("utf-8"))
        else:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        return cls({s: dict(parser[s]) for s in parser.sections()})

    def get(self, section: str, key: str) -> str:
        return self.sections[section][key]


@dataclass(frozen=True)
class EnhancementHint:
    task: RankingTask
    rating: float | None = None
    preferred: str | None = None
    order: tuple | None = None


@dataclass(frozen=True)
class PromptRecord:
    task: RankingTask
    user_id: str
    presented_items: tuple
    directive: str
    instruction_text: str
    enhancement: EnhancementHint | None = None
    shuffle_seed: int | None = None

    @property
    def text(self) -> str:
        """Full text sent to a chat model."""
        return f"{self.directive}\n\n{self.instruction_text}"


@dataclass
class InstructionRecord:
    instruction: str
    input: str
    output: str
    metadata: dict = field(default_factory=dict)


def position_shift(items, seed) -> list:
    """A uniformly random permutation of ``items`` under ``seed``."""
    items = list(items)
    if len(items) <= 1:
        return items
    order = np.random.default_rng(seed).permutation(len(items))
    return [items[i] for i in order]


def render_history(
    split: SplitDataset,
    user: str,
    max_items: int = 15,
    seed: int | None = None,
    exclude=frozenset(),
    templates: Templates | None = None,
) -> str:
    """Liked-items sentence then disliked-items sentence, most recent first.

    With a seed, the order inside each group is shuffled.
    """
    templates = templates or _default_templates()
    history = split.train.by_user.get(user)
    if not history:
        raise ContractError(f"user {user!r} has no train history")
    recent = [x for x in reversed(history) if x.item_id not in exclude]
    scale = split.scale_max
    liked = [x.item_id for x in recent if is_liked(x.rating, scale)][:max_items]
    disliked = [x.item_id for x in recent if not is_liked(x.rating, scale)][:max_items]
    if seed is not None:
        liked = position_shift(liked, derive_seed(seed, "liked"))
        disliked = position_shift(disliked, derive_seed(seed, "disliked"))
    empty = templates.get("history", "empty")

    def titles(ids):
        return LIST_SEP.join(split.title(i) for i in ids) or empty

    return " ".join([
        templates.get("history", "liked").format(titles=titles(liked)),
        templates.get("history", "disliked").format(titles=titles(disliked)),
    ])


_TEMPLATES = None


def _default_templates() -> Templates:
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = Templates.load()
    return _TEMPLATES


def _hint_text(hint: EnhancementHint, split: SplitDataset, templates, items) -> str:
    t = templates.sections[hint.task.value]["hint"]
    if hint.task is RankingTask.POINTWISE:
        return t.format(item=split.title(items[0]), rating=f"{hint.rating:.1f}")
    if hint.task is RankingTask.PAIRWISE:
        return t.format(item=split.title(hint.preferred))
    return t.format(items=LIST_SEP.join(split.title(i) for i in hint.order))


_ARITY = {RankingTask.POINTWISE: 1, RankingTask.PAIRWISE: 2}


def build_prompt(
    task,
    split: SplitDataset,
    user: str,
    candidates,
    hint: EnhancementHint | None = None,
    shuffle_seed: int | None = None,
    shift: bool = True,
    max_items: int = 15,
    exclude=frozenset(),
    templates: Templates | None = None,
) -> PromptRecord:
    """Render one ranking prompt.

    Candidates are position-shifted under ``shuffle_seed`` unless ``shift`` is
    false; the presented order is recorded on the returned PromptRecord.
    """
    task = RankingTask(task)
    templates = templates or _default_templates()
    candidates = list(candidates)
    want = _ARITY.get(task)
    if (want is not None and len(candidates) != want) or (task is RankingTask.LISTWISE and len(candidates) < 2):
        raise ContractError(f"{task.value} prompt cannot take {len(candidates)} candidates")
    if hint is not None:
        referenced = {hint.preferred} if hint.preferred else set(hint.order or ())
        if not referenced <= set(candidates):
            raise ContractError("hint references items outside the prompt")
    presented = candidates
    if shift and shuffle_seed is not None:
        presented = position_shift(candidates, derive_seed(shuffle_seed, "candidates"))
    history_seed = None if shuffle_seed is None else derive_seed(shuffle_seed, "history")
    parts = [render_history(split, user, max_items, history_seed, exclude, templates)]
    section = templates.sections[task.value]
    titles = [split.title(i) for i in presented]
    if task is RankingTask.POINTWISE:
        parts.append(section["question"].format(item=titles[0], scale_max=split.scale_max))
    elif task is RankingTask.PAIRWISE:
        parts.append(section["question"].format(first=titles[0], second=titles[1]))
    else:
        parts.append(section["question"].format(items=LIST_SEP.join(titles)))
    if hint is not None:
        parts.append(_hint_text(hint, split, templates, presented))
    return PromptRecord(
        task=task,
        user_id=user,
        presented_items=tuple(presented),
        directive=section["directive"],
        instruction_text="\n".join(parts),
        enhancement=hint,
        shuffle_seed=shuffle_seed,
    )


class Enhancer:
    """Turns conventional-model predictions into prompt hints."""

    def __init__(self, rating_model: FactorModel | None = None, ranking_model: FactorModel | None = None):
        self.rating_model = rating_model
        self.ranking_model = ranking_model

    def hint(self, task, user: str, items) -> EnhancementHint | None:
        task = RankingTask(task)
        items = list(items)
        if task is RankingTask.POINTWISE:
            if self.rating_model is None:
                return None
            return EnhancementHint(task, rating=predict_rating(self.rating_model, user, items[0]))
        if self.ranking_model is None:
            return None
        # Score ties resolve to the earlier item in ``items``.
        scores = [score(self.ranking_model, user, i) for i in items]
        order = sorted(range(len(items)), key=lambda n: (-scores[n], n))
        if task is RankingTask.PAIRWISE:
            return EnhancementHint(task, preferred=items[order[0]])
        return EnhancementHint(task, order=tuple(items[n] for n in order))


class PromptBuilder:
    """Binds a split, templates and an optional enhancer for repeated prompt rendering."""

    def __init__(self, split: SplitDataset, templates: Templates | None = None,
                 enhancer: Enhancer | None = None, max_items: int = 15):
        self.split = split
        self.templates = templates or _default_templates()
        self.enhancer = enhancer
        self.max_items = max_items

    def build(self, task, user, candidates, shuffle_seed=None, shift=True, exclude=frozenset(),
              hints=True) -> PromptRecord:
        hint = None
        if hints and self.enhancer is not None:
            hint = self.enhancer.hint(task, user, candidates)
        return build_prompt(task, self.split, user, candidates, hint, shuffle_seed, shift,
                            self.max_items, exclude, self.templates)


# -- training targets -------------------------------------------------------------------

_TIER = {"liked": 2, "negative": 1, "disliked": 0}


def _preference(e: CandidateEntry):
    # Liked > never-interacted > disliked; rating orders items inside a tier.
    return (_TIER[e.label], e.rating if e.rating is not None else 0.0)


def make_training_target(task, entries, split: SplitDataset, seed: int = 0) -> str | None:
    """Target answer for a training prompt whose candidates are ``entries`` (presented order).

    Returns None for instances with no determinate answer (two unrated items,
    or a pair with equal preference).
    """
    task = RankingTask(task)
    entries = list(entries)
    if task is RankingTask.POINTWISE:
        (e,) = entries
        if e.rating is None:
            return None
        return f"{format_rating(e.rating)}."
    if task is RankingTask.PAIRWISE:
        a, b = entries
        if a.rating is None and b.rating is None:
            return None
        pa, pb = _preference(a), _preference(b)
        if pa == pb:
            return None
        return "Yes." if pa > pb else "No."
    tiebreak = np.random.default_rng(seed).permutation(len(entries))
    order = sorted(
        range(len(entries)),
        key=lambda n: (
            -_TIER[entries[n].label],
            -(entries[n].rating or 0.0),
            -(entries[n].timestamp or 0),
            tiebreak[n],
        ),
    )
    return ", ".join(split.title(entries[n].item_id) for n in order)


# -- instruction dataset ------------------------------------------------------------------

@dataclass
class InstructionConfig:
    per_task_counts: dict = field(default_factory=lambda: {t.value: 5000 for t in TASKS})
    candidates: int = 10
    composition: tuple = DEFAULT_COMPOSITION
    min_history: int = 3
    train_hints: bool = True
    seed: int = 0


_PAIR_TYPES = (("liked", "disliked"), ("liked", "negative"), ("disliked", "negative"))


def _pick_instance(task: RankingTask, entries, rng):
    if task is RankingTask.POINTWISE:
        rated = [e for e in entries if e.rating is not None]
        return [rated[rng.integers(len(rated))]] if rated else None
    if task is RankingTask.PAIRWISE:
        by_label = {}
        for e in entries:
            by_label.setdefault(e.label, []).append(e)
        feasible = [p for p in _PAIR_TYPES if p[0] in by_label and p[1] in by_label]
        if not feasible:
            return None
        first, second = feasible[rng.integers(len(feasible))]
        return [by_label[first][rng.integers(len(by_label[first]))],
                by_label[second][rng.integers(len(by_label[second]))]]
    return list(entries)


def build_instruction_dataset(
    u_ins: UserMultiset,
    split: SplitDataset,
    config: InstructionConfig | None = None,
    builder: PromptBuilder | None = None,
):
    """Generate instruction records for every task over the occurrences of ``u_ins``.

    Returns ``(records, stats)``. Each occurrence of a user yields at most one
    instance per task, with freshly drawn candidates. Users with fewer than
    ``min_history`` train interactions and exact-duplicate prompt texts are
    dropped.
    """
    cfg = config or InstructionConfig()
    builder = builder or PromptBuilder(split)
    records: list[InstructionRecord] = []
    stats = {}
    occurrences = u_ins.occurrences()
    for task in TASKS:
        want = int(cfg.per_task_counts.get(task.value, 0))
        seen_texts = set()
        s = {"requested": want, "achieved": 0, "low_history": 0, "duplicates": 0, "indeterminate": 0}
        order = np.random.default_rng(derive_seed(cfg.seed, task.value, "order")).permutation(len(occurrences))
        for occ in order:
            if s["achieved"] >= want:
                break
            user = occurrences[occ]
            history = split.train.by_user.get(user, ())
            if len(history) < cfg.min_history:
                s["low_history"] += 1
                continue
            inst_seed = derive_seed(cfg.seed, task.value, int(occ))
            rng = np.random.default_rng(inst_seed)
            cands = select_training_candidates(split, user, cfg.candidates, cfg.composition,
                                               derive_seed(inst_seed, "candidates"))
            picked = _pick_instance(task, cands.entries, rng)
            if picked is None:
                s["indeterminate"] += 1
                continue
            by_item = {e.item_id: e for e in picked}
            prompt = builder.build(task, user, [e.item_id for e in picked], shuffle_seed=inst_seed,
                                   exclude=frozenset(e.item_id for e in cands.entries),
                                   hints=cfg.train_hints)
            presented = [by_item[i] for i in prompt.presented_items]
            target = make_training_target(task, presented, split, derive_seed(inst_seed, "target"))
            if target is None:
                s["indeterminate"] += 1
                continue
            key = (prompt.directive, prompt.instruction_text)
            if key in seen_texts:
                s["duplicates"] += 1
                continue
            seen_texts.add(key)
            records.append(InstructionRecord(
                instruction=prompt.directive,
                input=prompt.instruction_text,
                output=target,
                metadata={
                    "task": task.value,
                    "user_id": user,
                    "items": list(prompt.presented_items),
                    "labels": [e.label for e in presented],
                    "occurrence": int(occ),
                    "shuffle_seed": inst_seed,
                },
            ))
            s["achieved"] += 1
        if s["achieved"] < want:
            log.warning("%s: requested %d instructions, achieved %d", task.value, want, s["achieved"])
        stats[task.value] = s
    return records, stats


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.jsonl")


def write_instructions(path, records) -> None:
    """One {"instruction", "input", "output"} object per line, metadata in a sidecar keyed by line."""
    with open(path, "w", encoding="utf-8") as out, open(sidecar_path(path), "w", encoding="utf-8") as meta:
        for n, r in enumerate(records, start=1):
            out.write(json.dumps({"instruction": r.instruction, "input": r.input, "output": r.output},
                                 ensure_ascii=False) + "\n")
            meta.write(json.dumps({"line": n, **r.metadata}, ensure_ascii=False, sort_keys=True) + "\n")


def read_instructions(path) -> list[InstructionRecord]:
    side = sidecar_path(path)
    metas = {}
    if side.exists():
        for line in side.read_text(encoding="utf-8").splitlines():
            m = json.loads(line)
            metas[m.pop("line")] = m
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        obj = json.loads(line)
        if set(obj) != {"instruction", "input", "output"} or not all(isinstance(v, str) for v in obj.values()):
            raise ParseError(f"{path}:{n}: not an instruction/input/output record")
        records.append(InstructionRecord(obj["instruction"], obj["input"], obj["output"], metas.get(n, {})))
    return records


def record_dict(r: InstructionRecord) -> dict:
    return asdict(r)
