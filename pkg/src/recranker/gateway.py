"""Completion backends behind one interface, plus per-task response parsers."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import httpx
import numpy as np

from .corpus import SplitDataset, format_rating, id_key
from .errors import ConfigError, GatewayError, ParseError, ProtocolError, TransportError
from .prompting import PromptRecord, RankingTask
from .retrieval import FactorModel, predict_rating
from .seeds import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.1
    top_p: float = 0.1
    top_k: int = 10
    max_tokens: int = 256

    def __post_init__(self):
        if self.temperature < 0 or not 0 < self.top_p <= 1:
            raise ConfigError("need temperature >= 0 and 0 < top_p <= 1")


# -- parsers ------------------------------------------------------------------------------
# All parsers are total: they return None instead of raising on unusable text.

_NUMBER = re.compile(r"\d+(?:\.\d+)?")


def parse_pointwise(text: str, scale_max: int = 5) -> float | None:
    """First number in ``text`` lying within [1, scale_max]."""
    for m in _NUMBER.finditer(text or ""):
        value = float(m.group())
        if 1 <= value <= scale_max:
            return value
    return None


_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize_title(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT).split())


def _find_titles(text: str, titles) -> list[tuple[int, int]]:
    """(position, index) of titles appearing verbatim (after normalization) in ``text``.

    Longer titles claim their span first so a title that is a substring of
    another is not double-counted.
    """
    norm = f" {normalize_title(text)} "
    taken = [False] * len(norm)
    found = []
    for idx in sorted(range(len(titles)), key=lambda n: -len(titles[n])):
        needle = f" {normalize_title(titles[idx])} "
        if needle.strip() == "":
            continue
        start = 0
        while True:
            pos = norm.find(needle, start)
            if pos < 0:
                break
            span = range(pos + 1, pos + len(needle) - 1)
            if not any(taken[p] for p in span):
                for p in span:
                    taken[p] = True
                found.append((pos, idx))
                break
            start = pos + 1
    return sorted(found)


def parse_pairwise(text: str, titles=None) -> str | None:
    """"first" for a leading yes, "second" for a leading no, else a single named title."""
    head = normalize_title(text or "")
    if re.match(r"yes\b", head):
        return "first"
    if re.match(r"no\b", head):
        return "second"
    if titles:
        named = {idx for _, idx in _find_titles(text, list(titles))}
        if len(named) == 1:
            return "first" if named.pop() == 0 else "second"
    return None


_SEGMENT = re.compile(r"[\n;|,]")


def parse_listwise(text: str, titles, fallback_order=None, threshold: float = 0.6) -> list[int] | None:
    """Permutation of candidate indices in the order the response names them.

    Titles are first matched verbatim after normalization. Each remaining
    comma/newline-separated segment is then matched to the leftover title
    sharing the largest fraction of that title's tokens, if the fraction is at
    least ``threshold``. Unnamed candidates are appended in ``fallback_order``
    (default: index order). Fewer than half the candidates named -> None.
    """
    titles = list(titles)
    n = len(titles)
    hits = _find_titles(text or "", titles)
    named = {idx for _, idx in hits}
    spans = [(p + 1, p + 1 + len(normalize_title(titles[idx]))) for p, idx in hits]
    # Segment offsets live in the same padded normalized text as the verbatim hits.
    pos = 1
    for seg in _SEGMENT.split(text or ""):
        seg_norm = normalize_title(seg)
        if not seg_norm:
            continue
        start, end = pos, pos + len(seg_norm)
        pos = end + 1
        if any(a < end and start < b for a, b in spans):
            continue
        seg_tokens = set(seg_norm.split())
        best, best_score = None, 0.0
        for idx in range(n):
            if idx in named:
                continue
            t = set(normalize_title(titles[idx]).split())
            overlap = len(t & seg_tokens) / len(t) if t else 0.0
            if overlap > best_score:
                best, best_score = idx, overlap
        if best is not None and best_score >= threshold:
            named.add(best)
            hits.append((start, best))
    if 2 * len(named) < n:
        return None
    order = [idx for _, idx in sorted(hits)]
    return order + [i for i in (fallback_order or range(n)) if i not in named]


# -- backends -------------------------------------------------------------------------------

def prompt_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class OracleBackend:
    """Deterministic stand-in for a tuned LLM that answers from held-out ground truth.

    With probability ``noise`` per prompt the answer is replaced by a uniformly
    random one. The coin and the random answer depend only on (seed, prompt
    metadata), never on call order.
    """

    def __init__(self, split: SplitDataset, noise: float = 0.0, seed: int = 0,
                 rating_model: FactorModel | None = None):
        if not 0 <= noise <= 1:
            raise ConfigError("oracle noise must lie in [0, 1]")
        self.split = split
        self.noise = noise
        self.seed = seed
        self.rating_model = rating_model
        self._train_ratings = {(x.user_id, x.item_id): x.rating for x in split.train.interactions}

    def rating(self, user: str, item: str) -> float:
        """Held item -> top of scale; train item -> its rating; otherwise the MF
        prediction rounded and capped one below the top so the held item stays unique."""
        top = self.split.scale_max
        held = self.split.test.get(user)
        if held is not None and held.item_id == item:
            return float(top)
        observed = self._train_ratings.get((user, item))
        if observed is not None:
            return observed
        if self.rating_model is not None:
            guess = float(np.rint(predict_rating(self.rating_model, user, item)))
        else:
            guess = float(np.rint((1 + top) / 2))
        return min(max(guess, 1.0), float(top - 1))

    def _sort_key(self, user: str, item: str):
        # Strict total order: held item first, then higher rating, then smaller id.
        held = self.split.test.get(user)
        is_held = held is not None and held.item_id == item
        return (not is_held, -self.rating(user, item), id_key(item))

    def answer(self, prompt: PromptRecord) -> str:
        items = list(prompt.presented_items)
        key = (prompt.task.value, prompt.user_id, "|".join(items), prompt.shuffle_seed)
        rng = np.random.default_rng(derive_seed(self.seed, *key))
        noisy = rng.random() < self.noise
        if prompt.task is RankingTask.POINTWISE:
            if noisy:
                return f"{int(rng.integers(1, self.split.scale_max + 1))}."
            return f"{format_rating(self.rating(prompt.user_id, items[0]))}."
        if prompt.task is RankingTask.PAIRWISE:
            if noisy:
                return "Yes." if rng.random() < 0.5 else "No."
            a, b = (self._sort_key(prompt.user_id, i) for i in items)
            return "Yes." if a < b else "No."
        if noisy:
            order = [items[n] for n in rng.permutation(len(items))]
        else:
            order = sorted(items, key=lambda i: self._sort_key(prompt.user_id, i))
        return ", ".join(self.split.title(i) for i in order)

    def complete(self, prompt: PromptRecord, params: CompletionParams) -> str:
        return self.answer(prompt)


class RemoteBackend:
    """Chat-completion client over HTTP with bounded retries.

    The credential is read from the environment variable named by ``api_key_env``.
    """

    def __init__(self, endpoint: str, model: str = "recranker", api_key_env: str = "RECRANKER_API_KEY",
                 timeout: float = 60.0, retries: int = 3, backoff: float = 1.0,
                 transport: httpx.BaseTransport | None = None):
        if not endpoint:
            raise ConfigError("remote backend needs an endpoint URL")
        self.endpoint = endpoint
        self.model = model
        self.retries = retries
        self.backoff = backoff
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def request_body(self, text: str, params: CompletionParams) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": text}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "top_k": params.top_k,
            "max_tokens": params.max_tokens,
        }

    def complete(self, prompt: PromptRecord, params: CompletionParams, request_id: str = "") -> str:
        body = self.request_body(prompt.text, params)
        headers = {"X-Request-ID": request_id} if request_id else {}
        last = None
        for attempt in range(self.retries):
            try:
                resp = self.client.post(self.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                elif resp.status_code >= 400:
                    raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError):
                        raise ProtocolError(f"malformed completion body: {resp.text[:200]}") from None
            if attempt + 1 < self.retries:
                time.sleep(self.backoff * 2 ** attempt)
        if isinstance(last, ProtocolError):
            raise last
        raise TransportError(f"{self.endpoint}: no response after {self.retries} attempts ({last})")

    def close(self):
        self.client.close()


class ReplayBackend:
    """Re-serves responses from a transcript, keyed by prompt text (FIFO per key)."""

    def __init__(self, records):
        self.queues = defaultdict(deque)
        for r in records:
            self.queues[r["key"]].append(r["response"])

    @classmethod
    def from_file(cls, path) -> ReplayBackend:
        return cls(read_transcript(path))

    def complete(self, prompt: PromptRecord, params: CompletionParams) -> str:
        q = self.queues.get(prompt_key(prompt.text))
        if not q:
            raise TransportError("prompt not found in replay transcript")
        return q.popleft()


# -- gateway ------------------------------------------------------------------------------------

class Gateway:
    """Uniform completion entry point: counts calls, bounds concurrency, keeps a transcript."""

    def __init__(self, backend, params: CompletionParams | None = None, concurrency: int = 1,
                 record: bool = False, id_prefix: str = "req"):
        self.backend = backend
        self.id_prefix = id_prefix
        self.params = params or CompletionParams()
        self.concurrency = max(1, int(concurrency))
        self.record = record
        self.calls = 0
        self.transcript = []
        self._lock = threading.Lock()
        self._next_id = 0

    def _call(self, prompt: PromptRecord, request_id: str) -> str:
        if isinstance(self.backend, RemoteBackend):
            return self.backend.complete(prompt, self.params, request_id=request_id)
        return self.backend.complete(prompt, self.params)

    def complete_many(self, prompts) -> list:
        """Complete every prompt; each slot holds the text or the GatewayError raised."""
        prompts = list(prompts)
        with self._lock:
            ids = [f"{self.id_prefix}-{self._next_id + n}" for n in range(len(prompts))]
            self._next_id += len(prompts)
            self.calls += len(prompts)

        def run(pair):
            prompt, rid = pair
            try:
                return self._call(prompt, rid)
            except GatewayError as exc:
                return exc

        if self.concurrency == 1 or len(prompts) <= 1:
            results = [run(p) for p in zip(prompts, ids)]
        else:
            with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
                results = list(pool.map(run, zip(prompts, ids)))
        if self.record:
            with self._lock:
                for prompt, rid, res in zip(prompts, ids, results):
                    if isinstance(res, str):
                        self.transcript.append({
                            "id": rid,
                            "key": prompt_key(prompt.text),
                            "task": prompt.task.value,
                            "user": prompt.user_id,
                            "prompt": prompt.text,
                            "params": asdict(self.params),
                            "response": res,
                        })
        return results

    def complete(self, prompt: PromptRecord) -> str:
        (res,) = self.complete_many([prompt])
        if isinstance(res, Exception):
            raise res
        return res


def complete(backend, prompt: PromptRecord, params: CompletionParams | None = None) -> str:
    return Gateway(backend, params).complete(prompt)


def write_transcript(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def read_transcript(path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        try:
            out.append(json.loads(line))
        except ValueError:
            raise ParseError(f"{path}:{n}: bad transcript line") from None
    return out
