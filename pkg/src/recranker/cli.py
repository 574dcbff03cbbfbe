"""Command-line pipeline: ingest -> train-retrieval -> build-instructions -> rerank -> evaluate.

Every stage reads the previous stage's files from the output directory and
writes its own, so any stage can be rerun in isolation. Configuration is one
TOML file with a section per stage; ``--set section.key=value`` overrides any
key. Each stage draws its randomness from ``derive_seed(seed, stage)``.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import corpus, evaluation, gateway, prompting, retrieval, sampling
from .errors import ConfigError, ParseError, RecRankerError, ValidationError
from .reranker import RerankConfig, rerank_user, write_results, write_utilities, read_results
from .seeds import derive_seed

log = logging.getLogger("recranker")

BUNDLED = "bundled"

DEFAULTS = {
    "pipeline": {"seed": 0, "output_dir": "runs/default"},
    "data": {
        "ratings": BUNDLED,
        "format": "tsv",
        "delimiter": "",
        "skip_header": False,
        "encoding": "utf-8",
        "synthetic_timestamps": False,
        "scale_max": 5,
        "catalog": "",
        "catalog_delimiter": "|",
        "catalog_encoding": "latin-1",
        "catalog_skip_header": False,
        "k_core": 10,
    },
    "retrieval": {
        "d": 64,
        "learning_rate": 0.01,
        "regularization": 0.02,
        "epochs": 30,
        "negatives": 4,
        "batch_size": 256,
        "candidate_model": "ranking",
    },
    "sampling": {"n_target": 1000, "n_final": 0, "clusters": 10, "penalty": 0.92},
    "instructions": {
        "pointwise": 5000,
        "pairwise": 5000,
        "listwise": 5000,
        "candidates": 10,
        "composition": [3, 3, 4],
        "min_history": 3,
        "train_hints": True,
        "max_history": 15,
        "templates": "",
    },
    "rerank": {
        "k": 5,
        "candidates": 10,
        "c1": 0.05,
        "c2": 0.5,
        "c3": 0.025,
        "alpha": [1 / 3, 1 / 3, 1 / 3],
        "mode": "hybrid",
        "listwise_shuffles": 2,
        "hints": True,
        "max_users": 0,
    },
    "gateway": {
        "backend": "oracle",
        "noise": 0.0,
        "endpoint": "",
        "model": "recranker",
        "api_key_env": "RECRANKER_API_KEY",
        "timeout": 60.0,
        "retries": 3,
        "backoff": 1.0,
        "temperature": 0.1,
        "top_p": 0.1,
        "top_k": 10,
        "max_tokens": 256,
        "concurrency": 1,
        "transcript": "",
    },
    "evaluate": {"ks": [3, 5], "literal_ndcg": False},
}


# -- configuration -------------------------------------------------------------------------

def _merge(base: dict, extra: dict, origin: str) -> None:
    for section, values in extra.items():
        if section not in base or not isinstance(values, dict):
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            base[section][key] = _coerce(base[section][key], value, f"{origin}: {section}.{key}")


def _coerce(default, value, where: str):
    """Check ``value`` against the type of the default it replaces."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where} expects {type(default).__name__}, got {value!r}")
    return value


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the TOML file, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                _merge(cfg, tomllib.load(fh), str(path))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        dotted, sep, text = item.partition("=")
        section, dot, key = dotted.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        _merge(cfg, {section: {key: _parse_value(text.strip())}}, "--set")
    return cfg


def dump_config(cfg: dict) -> str:
    """Render the resolved configuration as TOML."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {fmt(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


# -- artifact layout -----------------------------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)
        self.dataset = self.root / "dataset.tsv"
        self.split = self.root / "split.tsv"
        self.stats = self.root / "stats.txt"
        self.rating_model = self.root / "models" / "rating_mf.txt"
        self.ranking_model = self.root / "models" / "ranking_mf.txt"
        self.sampling = self.root / "sampling"
        self.instructions = self.root / "instructions.jsonl"
        self.candidates = self.root / "candidates.tsv"
        self.results = self.root / "rerank" / "results.tsv"
        self.utilities = self.root / "rerank" / "utilities.tsv"
        self.summary = self.root / "rerank" / "summary.txt"
        self.transcript = self.root / "rerank" / "transcript.jsonl"
        self.report = self.root / "report.txt"
        self.report_tsv = self.root / "report.tsv"


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input file {p}")


def _guard(force: bool, *paths) -> None:
    if force:
        return
    for p in paths:
        if Path(p).exists():
            raise FileExistsError(f"{p} exists; pass --force to overwrite")


def _bundled(name: str) -> Path:
    return Path(str(resources.files("recranker") / "data" / name))


def _load_split(lay: Layout) -> corpus.SplitDataset:
    _require(lay.split)
    return corpus.read_split(lay.split)


def _load_models(lay: Layout):
    _require(lay.rating_model, lay.ranking_model)
    return retrieval.load_model(lay.rating_model), retrieval.load_model(lay.ranking_model)


def _templates(cfg) -> prompting.Templates:
    path = cfg["instructions"]["templates"]
    if path:
        _require(path)
    return prompting.Templates.load(path or None)


# -- stages --------------------------------------------------------------------------------

def format_stats(rows: dict) -> str:
    """Dataset statistics table, one row per named dataset."""
    lines = [f"{'Dataset':<20}{'#User':>8}{'#Item':>8}{'#Rating':>10}{'Density':>10}"]
    for name, st in rows.items():
        lines.append(f"{name:<20}{st['users']:>8,}{st['items']:>8,}{st['ratings']:>10,}{st['density']:>10.6f}")
    return "\n".join(lines) + "\n"


def cmd_ingest(cfg: dict, force: bool = False, jobs: int = 1) -> corpus.SplitDataset:
    d = cfg["data"]
    lay = Layout(cfg["pipeline"]["output_dir"])
    if d["ratings"] == BUNDLED:
        ratings, catalog = _bundled("fixture_ratings.tsv"), _bundled("fixture_items.txt")
        log.info("using the bundled synthetic fixture")
    else:
        ratings, catalog = Path(d["ratings"]), (Path(d["catalog"]) if d["catalog"] else None)
    _require(ratings, *([catalog] if catalog else []))
    _guard(force, lay.dataset, lay.split)
    seed = derive_seed(cfg["pipeline"]["seed"], "ingest")
    t0 = time.perf_counter()
    xs = corpus.parse_interactions(
        ratings, d["format"], d["scale_max"], d["delimiter"] or None, d["skip_header"],
        d["synthetic_timestamps"], seed, d["encoding"],
    )
    items = None
    if catalog:
        items = corpus.parse_catalog(catalog, d["catalog_delimiter"], d["catalog_encoding"],
                                     d["catalog_skip_header"])
    raw = corpus.build_dataset(xs, items, d["scale_max"], seed)
    kept = corpus.apply_k_core(raw.interactions, d["k_core"]) if d["k_core"] > 1 else raw.interactions
    ds = corpus.build_dataset(kept, raw.catalog, d["scale_max"], seed)
    split = corpus.leave_one_out_split(ds)
    lay.root.mkdir(parents=True, exist_ok=True)
    corpus.write_dataset(lay.dataset, ds)
    corpus.write_split(lay.split, split)
    name = "bundled" if d["ratings"] == BUNDLED else Path(d["ratings"]).parent.name or "dataset"
    table = format_stats({name: raw.stats(), f"{name} {d['k_core']}-core": ds.stats()})
    lay.stats.write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"split users: {len(split.test):,} (skipped {split.skipped_users}); {time.perf_counter() - t0:.2f}s")
    return split


def _mf_config(cfg: dict, stage: str) -> retrieval.MFConfig:
    r = cfg["retrieval"]
    return retrieval.MFConfig(
        d=r["d"], learning_rate=r["learning_rate"], regularization=r["regularization"],
        epochs=r["epochs"], negatives=r["negatives"], batch_size=r["batch_size"],
        seed=derive_seed(cfg["pipeline"]["seed"], "retrieval", stage),
    )


def cmd_train_retrieval(cfg: dict, force: bool = False, jobs: int = 1):
    lay = Layout(cfg["pipeline"]["output_dir"])
    split = _load_split(lay)
    _guard(force, lay.rating_model, lay.ranking_model)
    lay.rating_model.parent.mkdir(parents=True, exist_ok=True)
    models = []
    for kind, trainer, path in (("rating", retrieval.train_rating_mf, lay.rating_model),
                                ("ranking", retrieval.train_ranking_mf, lay.ranking_model)):
        t0 = time.perf_counter()
        model = trainer(split.train, _mf_config(cfg, kind))
        retrieval.save_model(path, model)
        models.append(model)
        print(f"{kind} MF: d={model.d} final loss {model.loss_history[-1]:.6f} "
              f"({time.perf_counter() - t0:.1f}s) -> {path}")
    return tuple(models)


def cmd_build_instructions(cfg: dict, force: bool = False, jobs: int = 1):
    lay = Layout(cfg["pipeline"]["output_dir"])
    split = _load_split(lay)
    rating_model, ranking_model = _load_models(lay)
    templates = _templates(cfg)
    _guard(force, lay.instructions)
    seed = derive_seed(cfg["pipeline"]["seed"], "sampling")
    s = cfg["sampling"]
    scfg = sampling.SamplingConfig(s["n_target"], s["n_final"] or None, s["clusters"], s["penalty"], seed)
    u1, u2, u3, u_ins = sampling.adaptive_sampling(
        split.train, retrieval.user_embeddings(ranking_model), scfg)
    lay.sampling.mkdir(parents=True, exist_ok=True)
    named = {"importance": u1, "clustering": u2, "combined": u3, "final": u_ins}
    for name, ms in named.items():
        sampling.write_multiset(lay.sampling / f"{name}.tsv", ms)
    (lay.sampling / "report.txt").write_text(
        sampling.format_report({n: sampling.sampling_report(ms) for n, ms in named.items()}),
        encoding="utf-8")

    ins = cfg["instructions"]
    icfg = prompting.InstructionConfig(
        per_task_counts={t.value: ins[t.value] for t in prompting.TASKS},
        candidates=ins["candidates"], composition=tuple(ins["composition"]),
        min_history=ins["min_history"], train_hints=ins["train_hints"],
        seed=derive_seed(cfg["pipeline"]["seed"], "instructions"),
    )
    builder = prompting.PromptBuilder(split, templates, prompting.Enhancer(rating_model, ranking_model),
                                      ins["max_history"])
    records, stats = prompting.build_instruction_dataset(u_ins, split, icfg, builder)
    prompting.write_instructions(lay.instructions, records)
    print(f"sampled users: {len(u_ins)} occurrences over {len(u_ins.multiplicity)} distinct users")
    print(f"{'task':<10}{'requested':>10}{'achieved':>10}{'<history':>10}{'dupes':>8}{'undecided':>10}")
    for task, st in stats.items():
        print(f"{task:<10}{st['requested']:>10}{st['achieved']:>10}{st['low_history']:>10}"
              f"{st['duplicates']:>8}{st['indeterminate']:>10}")
        log.info("%s filters: %d below history floor, %d duplicate texts, %d without a target",
                 task, st["low_history"], st["duplicates"], st["indeterminate"])
    print(f"wrote {len(records)} records -> {lay.instructions}")
    return records, stats


def _rerank_config(cfg: dict) -> RerankConfig:
    r = cfg["rerank"]
    return RerankConfig(
        k=r["k"], candidates=r["candidates"], c1=r["c1"], c2=r["c2"], c3=r["c3"],
        alpha=tuple(r["alpha"]), mode=r["mode"], listwise_shuffles=r["listwise_shuffles"],
        seed=derive_seed(cfg["pipeline"]["seed"], "rerank"),
    )


def _backend(cfg: dict, split, rating_model):
    g = cfg["gateway"]
    kind = g["backend"]
    if kind == "oracle":
        return gateway.OracleBackend(split, g["noise"], derive_seed(cfg["pipeline"]["seed"], "oracle"),
                                     rating_model)
    if kind == "remote":
        return gateway.RemoteBackend(g["endpoint"], g["model"], g["api_key_env"], g["timeout"],
                                     g["retries"], g["backoff"])
    if kind == "replay":
        if not g["transcript"]:
            raise ConfigError("replay backend needs gateway.transcript")
        _require(g["transcript"])
        return gateway.ReplayBackend.from_file(g["transcript"])
    raise ConfigError(f"unknown gateway.backend {kind!r}")


def cmd_rerank(cfg: dict, force: bool = False, jobs: int = 1):
    lay = Layout(cfg["pipeline"]["output_dir"])
    split = _load_split(lay)
    rating_model, ranking_model = _load_models(lay)
    templates = _templates(cfg)
    rcfg = _rerank_config(cfg)
    _guard(force, lay.candidates, lay.results)
    g = cfg["gateway"]
    params = gateway.CompletionParams(g["temperature"], g["top_p"], g["top_k"], g["max_tokens"])
    backend = _backend(cfg, split, rating_model)

    source = {"ranking": ranking_model, "rating": rating_model}.get(cfg["retrieval"]["candidate_model"])
    if source is None:
        raise ConfigError("retrieval.candidate_model must be 'ranking' or 'rating'")
    users = sorted(split.test, key=corpus.id_key)
    if cfg["rerank"]["max_users"]:
        users = users[: cfg["rerank"]["max_users"]]
    cands = [retrieval.top_candidates(source, split.train, u, rcfg.candidates) for u in users]
    lay.results.parent.mkdir(parents=True, exist_ok=True)
    retrieval.write_candidates(lay.candidates, cands)

    enhancer = prompting.Enhancer(rating_model, ranking_model) if cfg["rerank"]["hints"] else None
    builder = prompting.PromptBuilder(split, templates, enhancer, cfg["instructions"]["max_history"])

    def run(cl):
        gw = gateway.Gateway(backend, params, g["concurrency"], record=True, id_prefix=f"u{cl.user_id}")
        return rerank_user(cl.user_id, cl, gw, rcfg, builder), gw

    t0 = time.perf_counter()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(run, cands))
    else:
        done = [run(cl) for cl in cands]
    results = [r for r, _ in done]
    transcript = [rec for _, gw in done for rec in gw.transcript]
    write_results(lay.results, results)
    write_utilities(lay.utilities, results)
    gateway.write_transcript(lay.transcript, transcript)

    calls = sum(gw.calls for _, gw in done)
    expected = sum(rcfg.expected_calls(len(cl)) for cl in cands)
    summary = [
        f"mode: {rcfg.mode}  backend: {g['backend']}  users: {len(results)}",
        f"gateway calls: {calls}  expected: {expected} "
        f"(k'+2k+shuffles = {rcfg.expected_calls()} per user)",
        f"parse failures: {sum(r.parse_failures for r in results)}",
        f"degraded users: {sum(r.degraded for r in results)}",
    ]
    lay.summary.write_text("\n".join(summary) + "\n", encoding="utf-8")
    print("\n".join(summary))
    print(f"reranked in {time.perf_counter() - t0:.1f}s -> {lay.results}")
    if isinstance(backend, gateway.RemoteBackend):
        backend.close()
    return results


def cmd_evaluate(cfg: dict, force: bool = False, jobs: int = 1):
    lay = Layout(cfg["pipeline"]["output_dir"])
    split = _load_split(lay)
    _require(lay.candidates, lay.results)
    _guard(force, lay.report, lay.report_tsv)
    cands = {u: list(cl.items) for u, cl in retrieval.read_candidates(lay.candidates).items()}
    reranked = read_results(lay.results)
    held = {u: split.test[u].item_id for u in cands}
    ks = tuple(cfg["evaluate"]["ks"])
    literal = cfg["evaluate"]["literal_ndcg"]
    base = evaluation.evaluate(cands, held, cands, ks, literal)
    new = evaluation.evaluate(reranked, held, cands, ks, literal)
    transitions = {k: evaluation.transition_analysis(cands, reranked, held, k) for k in ks}
    table = evaluation.format_table(base, new, transitions)
    lay.report.write_text(table, encoding="utf-8")

    rows = ["metric\tretrieval\treranked\timprovement_pct"]
    for (name, b), (_, r) in zip(base.rows(), new.rows()):
        imp = evaluation.improvement(b, r)
        rows.append(f"{name}\t{b!r}\t{r!r}\t{'NA' if imp is None else repr(imp)}")
    for k, tr in transitions.items():
        rows += [f"{key}@{k}\t\t{c}\t" for key, c in tr.counts.items()]
    lay.report_tsv.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(table, end="")
    return base, new, transitions


STAGES = {
    "ingest": cmd_ingest,
    "train-retrieval": cmd_train_retrieval,
    "build-instructions": cmd_build_instructions,
    "rerank": cmd_rerank,
    "evaluate": cmd_evaluate,
}


def cmd_run(cfg: dict, force: bool = False, jobs: int = 1):
    for name, stage in STAGES.items():
        print(f"== {name}")
        stage(cfg, force, jobs)


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="users reranked in parallel")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="recranker", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run", "show-config"):
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.overrides)
        if args.command == "show-config":
            print(dump_config(cfg), end="")
        elif args.command == "run":
            cmd_run(cfg, args.force, args.jobs)
        else:
            STAGES[args.command](cfg, args.force, args.jobs)
    except (ConfigError, ParseError, ValidationError, FileNotFoundError, FileExistsError) as exc:
        print(f"recranker: error: {exc}", file=sys.stderr)
        return 2
    except RecRankerError as exc:
        print(f"recranker: failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("internal error")
        print(f"recranker: internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
