"""Operator command line: search, build-dataset, analyze, bench.

Structural settings live in a config file (YAML or JSON) committed with the
run; flags override scalars. Report-producing commands write figures next to
their delimited outputs. Exit codes: 0 ok, 2 config/usage error, 3 I/O or
input-data error, 4 every question failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import yaml

from . import bench as bench_mod
from .backends import PolicyDescriptor, SimProfile, make_ensemble
from .dataset_io import (
    DatasetError,
    SearchRecord,
    flatten_for_sft,
    load_questions,
    read_records,
    step_stats,
    write_records,
)
from .engine import SearchConfig, search
from .prompts import PromptSet, load_template
from .reflection import build_reflective_path, sample_reflection_subset

log = logging.getLogger("comcts")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ALL_FAILED = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    ensemble: list[PolicyDescriptor] = field(default_factory=list)
    prompts: PromptSet = field(default_factory=PromptSet)
    seed: int = 0
    workers: int = 4
    reflection_ratio: float = 0.15


# ------------------------------------------------------------- config files


def _check_keys(raw: dict, allowed: set[str], context: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {context}: {sorted(unknown)}")


def _load_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        if path.endswith((".yaml", ".yml")):
            raw = yaml.safe_load(f)
        else:
            raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def _parse_profile(raw: dict, context: str) -> SimProfile:
    _check_keys(raw, {"knowledge_topics", "step_accuracy", "eval_noise", "rng_seed"}, context)
    try:
        return SimProfile(
            knowledge_topics=frozenset(raw.get("knowledge_topics", [])),
            step_accuracy=dict(raw.get("step_accuracy", {})),
            eval_noise=float(raw.get("eval_noise", 0.0)),
            rng_seed=int(raw.get("rng_seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _parse_descriptor(raw: dict, index: int) -> PolicyDescriptor:
    context = f"ensemble[{index}]"
    _check_keys(
        raw,
        {"name", "kind", "endpoint", "model_id", "temperature", "eval_temperature",
         "max_tokens", "profile"},
        context,
    )
    for key in ("name", "kind"):
        if not raw.get(key):
            raise ConfigError(f"{context}: missing required key {key!r}")
    profile = None
    if raw.get("profile") is not None:
        profile = _parse_profile(raw["profile"], f"{context}.profile")
    try:
        return PolicyDescriptor(
            name=raw["name"],
            kind=raw["kind"],
            endpoint=raw.get("endpoint"),
            model_id=raw.get("model_id"),
            temperature=float(raw.get("temperature", 1.0)),
            eval_temperature=float(raw.get("eval_temperature", 0.0)),
            max_tokens=int(raw.get("max_tokens", 1024)),
            profile=profile,
        )
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _parse_search(raw: dict) -> SearchConfig:
    _check_keys(
        raw,
        {"max_iterations", "threshold_t", "exploration_c", "candidates_per_model",
         "request_concurrency"},
        "search",
    )
    defaults = SearchConfig()
    try:
        return SearchConfig(
            max_iterations=int(raw.get("max_iterations", defaults.max_iterations)),
            threshold_t=float(raw.get("threshold_t", defaults.threshold_t)),
            exploration_c=float(raw.get("exploration_c", defaults.exploration_c)),
            candidates_per_model=int(
                raw.get("candidates_per_model", defaults.candidates_per_model)
            ),
            request_concurrency=int(
                raw.get("request_concurrency", defaults.request_concurrency)
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"search: {exc}") from exc


def _parse_prompts(raw: dict) -> PromptSet:
    _check_keys(raw, {"generate", "evaluate", "reflect"}, "prompts")
    prompts = PromptSet()
    for name in ("generate", "evaluate", "reflect"):
        path = raw.get(name)
        if path:
            setattr(prompts, name, load_template(path))
    return prompts


def load_run_config(path: str) -> RunConfig:
    raw = _load_config_file(path)
    _check_keys(
        raw,
        {"search", "ensemble", "prompts", "seed", "workers", "reflection_ratio"},
        path,
    )
    if "ensemble" not in raw or not raw["ensemble"]:
        raise ConfigError(f"{path}: missing required key 'ensemble'")
    cfg = RunConfig(
        search=_parse_search(raw.get("search", {})),
        ensemble=[_parse_descriptor(d, i) for i, d in enumerate(raw["ensemble"])],
        prompts=_parse_prompts(raw.get("prompts", {})),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 4)),
        reflection_ratio=float(raw.get("reflection_ratio", 0.15)),
    )
    names = [d.name for d in cfg.ensemble]
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate ensemble names {names}")
    return cfg


@dataclass
class BenchConfig:
    world_n_tasks: int
    world_topic_mix: dict[str, float]
    world_seed: int
    ensemble: list[PolicyDescriptor]
    search: SearchConfig
    methods: list[str]
    ablation: bool
    seed: int
    workers: int


def load_bench_config(path: str) -> BenchConfig:
    raw = _load_config_file(path)
    _check_keys(
        raw, {"world", "ensemble", "search", "methods", "ablation", "seed", "workers"}, path
    )
    for key in ("world", "ensemble"):
        if key not in raw:
            raise ConfigError(f"{path}: missing required key {key!r}")
    world = raw["world"]
    _check_keys(world, {"n_tasks", "topic_mix", "seed"}, "world")
    for key in ("n_tasks", "topic_mix"):
        if key not in world:
            raise ConfigError(f"world: missing required key {key!r}")
    return BenchConfig(
        world_n_tasks=int(world["n_tasks"]),
        world_topic_mix={str(k): float(v) for k, v in world["topic_mix"].items()},
        world_seed=int(world.get("seed", 0)),
        ensemble=[_parse_descriptor(d, i) for i, d in enumerate(raw["ensemble"])],
        search=_parse_search(raw.get("search", {})),
        methods=list(raw.get("methods", ["comcts", "vanilla"])),
        ablation=bool(raw.get("ablation", True)),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
    )


# ---------------------------------------------------------------- commands


def _derive_seed(base: int, *parts: object) -> int:
    return bench_mod._derive_seed(base, *parts)


def _outcome_record(question, outcome) -> SearchRecord:
    telemetry = {
        "succeeded": outcome.succeeded,
        "iterations_used": outcome.iterations_used,
        "nodes_added": sum(s.get("nodes_added", 0) for s in outcome.telemetry),
        "nodes_pruned": sum(s.get("nodes_pruned", 0) for s in outcome.telemetry),
    }
    return SearchRecord(
        question=question,
        tree=outcome.tree,
        effective_path=outcome.effective_steps() if outcome.succeeded else None,
        effective_path_ids=outcome.effective_path,
        reflective_path=None,
        telemetry=telemetry,
    )


def cmd_search(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError("search requires --config")
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    workers = args.workers if args.workers is not None else cfg.workers
    questions = list(load_questions(args.questions))
    started = time.monotonic()

    def run_one(question):
        ensemble = make_ensemble(cfg.ensemble, run_seed=seed, prompts=cfg.prompts)
        try:
            outcome = search(question, ensemble, cfg.search,
                             rng_seed=_derive_seed(seed, question.id))
        except Exception:
            log.exception("search failed for question %s", question.id)
            return question, None
        return question, outcome

    if workers > 1:
        pool = ThreadPoolExecutor(max_workers=workers)
        stream = pool.map(run_one, questions)
    else:
        pool = None
        stream = map(run_one, questions)
    records = []
    successes = 0
    try:
        with open(args.out, "w", encoding="utf-8") as f:
            for question, outcome in stream:
                if outcome is None:
                    continue
                record = _outcome_record(question, outcome)
                write_records(f, [record])
                records.append(record)
                successes += int(outcome.succeeded)
    finally:
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)
    elapsed = time.monotonic() - started
    attempted = len(records)
    if attempted:
        ssr = successes / attempted
        avg_iter = sum(r.telemetry["iterations_used"] for r in records) / attempted
        lengths = [len(r.effective_path) for r in records if r.effective_path]
        mean_steps = sum(lengths) / len(lengths) if lengths else float("nan")
        print(
            f"searched {attempted} questions in {elapsed:.1f}s: "
            f"success rate {ssr:.3f}, avg iterations {avg_iter:.2f}, "
            f"mean effective-path steps {mean_steps:.2f}"
        )
    else:
        print("no questions searched")
    if questions and successes == 0:
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_build_dataset(args: argparse.Namespace) -> int:
    ratio = args.reflection_ratio
    if ratio is not None and not 0 < ratio <= 1:
        raise ConfigError(f"reflection ratio must be in (0, 1], got {ratio}")
    if ratio is None:
        ratio = 0.15
    seed = args.seed if args.seed is not None else 0
    errors = []
    records = list(read_records(args.records, error_sink=errors))
    for err in errors:
        log.warning("%s: %s", args.records, err)
    succeeded = [r for r in records if r.succeeded]
    if not succeeded:
        log.warning("no succeeded records in %s; writing empty dataset", args.records)
    exploration_c = SearchConfig().exploration_c
    sampled = sample_reflection_subset(succeeded, float(ratio), seed) if succeeded else []
    sampled_ids = {id(r) for r in sampled}
    for record in sampled:
        record.reflective_path = build_reflective_path(
            record.tree,
            record.effective_path_ids,
            seed=_derive_seed(seed, record.question.id),
            c=exploration_c,
        )
    write_records(args.out, succeeded)
    sft_path = args.out + ".sft.jsonl"
    with open(sft_path, "w", encoding="utf-8") as f:
        for record in succeeded:
            prompt, target = flatten_for_sft(record, "effective")
            f.write(json.dumps(
                {"question_id": record.question.id, "kind": "effective",
                 "prompt": prompt, "target": target},
                ensure_ascii=False, separators=(",", ":")) + "\n")
            if id(record) in sampled_ids and record.reflective_path is not None:
                prompt, target = flatten_for_sft(record, "reflective")
                f.write(json.dumps(
                    {"question_id": record.question.id, "kind": "reflective",
                     "prompt": prompt, "target": target},
                    ensure_ascii=False, separators=(",", ":")) + "\n")
    n_reflective = sum(1 for r in succeeded if r.reflective_path is not None)
    print(
        f"wrote {len(succeeded)} records ({n_reflective} with reflective paths) "
        f"to {args.out}; SFT view at {sft_path}"
    )
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    errors = []
    records = list(read_records(args.records, error_sink=errors))
    for err in errors:
        log.warning("%s: %s", args.records, err)
    stats = step_stats(records, group_by_topic=args.group_by_topic)
    if args.format == "machine":
        print(json.dumps(
            [
                {"group": s.group_key, "count": s.count, "mean": s.mean,
                 "histogram": {str(k): v for k, v in s.histogram.items()}}
                for s in stats
            ],
            ensure_ascii=False,
        ))
    else:
        print(f"{'group':<16} {'paths':>6} {'mean steps':>11}")
        for s in stats:
            group = s.group_key if s.group_key is not None else "all"
            print(f"{group:<16} {s.count:>6d} {s.mean:>11.2f}")
    if args.out:
        with open(args.out + ".csv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["group", "steps", "frequency"])
            for s in stats:
                group = s.group_key if s.group_key is not None else "all"
                for length, freq in s.histogram.items():
                    writer.writerow([group, length, freq])
        from .plots import save_step_histogram

        save_step_histogram(stats, args.out + ".png")
        print(f"wrote {args.out}.csv and {args.out}.png")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError("bench requires --config")
    cfg = load_bench_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    workers = args.workers if args.workers is not None else cfg.workers
    try:
        world = bench_mod.generate_world(cfg.world_n_tasks, cfg.world_topic_mix, cfg.world_seed)
        report = bench_mod.run_bench(
            world, cfg.methods, cfg.ensemble, cfg.search, seed,
            ablation=cfg.ablation, workers=workers,
        )
    except bench_mod.WorldConfigError as exc:
        raise ConfigError(str(exc)) from exc
    if args.format == "machine":
        print(json.dumps(report.to_dict(), ensure_ascii=False))
    else:
        print(bench_mod.render_report(report))
    if args.out:
        with open(args.out + ".json", "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, ensure_ascii=False)
            f.write("\n")
        with open(args.out + ".csv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["method", "success_rate", "avg_iterations"])
            for name, m in sorted(report.methods.items()):
                writer.writerow([name, m.success_rate, m.avg_iterations])
            for row in report.ablation:
                writer.writerow(
                    [f"comcts[k={row['ensemble_size']}]", row["success_rate"], ""]
                )
        from .plots import save_bench_chart

        save_bench_chart(report, args.out + ".png")
        print(f"wrote {args.out}.json, {args.out}.csv and {args.out}.png")
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comcts",
        description="Collective reasoning-path search, dataset construction and benchmarking.",
    )
    parser.add_argument("--config", help="config file (YAML or JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=None, help="parallel question workers")
    parser.add_argument("--format", choices=["text", "machine"], default="text")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run reasoning-path search over a question file")
    p.add_argument("questions", help="question JSONL file")
    p.add_argument("out", help="output record JSONL file")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("build-dataset", help="attach reflective paths and flatten for SFT")
    p.add_argument("records", help="search record JSONL file")
    p.add_argument("out", help="output dataset JSONL file")
    p.add_argument("--reflection-ratio", type=float, default=None,
                   help="fraction of eligible records to give a reflective path")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("analyze", help="step-count distribution of searched records")
    p.add_argument("records", help="search record JSONL file")
    p.add_argument("--group-by-topic", action="store_true")
    p.add_argument("--out", help="prefix for the CSV and figure outputs")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="compare search methods on a synthetic world")
    p.add_argument("--out", help="prefix for the JSON, CSV and figure outputs")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
