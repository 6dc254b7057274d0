"""Synthetic reasoning worlds and the search-method benchmark harness.

Worlds are seeded task sets with one canonical derivation per task plus
distractor steps at every depth, encoded into the question text so scripted
backends can act them out. The harness compares the collective search
against a single-model baseline that expands one node per iteration, and
sweeps ensemble prefixes for the coverage ablation.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

from .backends import PolicyBackend, PolicyDescriptor, encode_taskspec, make_backend, make_ensemble
from .dataset_io import QuestionRecord
from .engine import (
    SearchConfig,
    SearchOutcome,
    backpropagate,
    find_effective_path,
    search,
    select,
    simulate_and_prune,
)
from .tree import ReasoningTree


class WorldConfigError(ValueError):
    pass


@dataclass
class SyntheticTask:
    id: str
    topic: str
    canonical_steps: list[str]  # last entry is the terminal answer step
    ground_truth: str
    distractors: list[list[str]]  # wrong alternatives per depth
    wrong_answers: list[str]


@dataclass
class MethodResult:
    name: str
    success_rate: float
    avg_iterations: float
    outcomes: list[dict]  # per-question {id, succeeded, iterations}


@dataclass
class BenchReport:
    methods: dict[str, MethodResult]
    ablation: list[dict]  # [{"ensemble_size": k, "success_rate": r}]
    config: dict
    seed: int
    # Failed questions count at max_iterations in avg_iterations; the
    # denominator is all attempted questions.
    avg_iterations_denominator: str = "all attempted questions (failures at max_iterations)"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "avg_iterations_denominator": self.avg_iterations_denominator,
            "config": self.config,
            "methods": {
                name: {
                    "success_rate": m.success_rate,
                    "avg_iterations": m.avg_iterations,
                    "outcomes": m.outcomes,
                }
                for name, m in sorted(self.methods.items())
            },
            "ablation": self.ablation,
        }


def _derive_seed(base: int, *parts: object) -> int:
    import hashlib

    key = "|".join([str(base), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


def generate_world(
    n_tasks: int, topic_mix: dict[str, float], seed: int
) -> list[SyntheticTask]:
    """Seeded task set with exact largest-remainder topic proportions."""
    if n_tasks < 1:
        raise WorldConfigError("n_tasks must be >= 1")
    if not topic_mix:
        raise WorldConfigError("topic_mix must not be empty")
    if any(p < 0 for p in topic_mix.values()) or abs(sum(topic_mix.values()) - 1.0) > 1e-9:
        raise WorldConfigError(
            f"topic proportions must be non-negative and sum to 1 (got {sum(topic_mix.values())})"
        )
    topics = sorted(topic_mix)
    quotas = {t: topic_mix[t] * n_tasks for t in topics}
    counts = {t: math.floor(quotas[t]) for t in topics}
    shortfall = n_tasks - sum(counts.values())
    for t in sorted(topics, key=lambda t: (-(quotas[t] - counts[t]), t))[:shortfall]:
        counts[t] += 1

    import random

    rng = random.Random(seed)
    tasks = []
    idx = 0
    for topic in topics:
        for _ in range(counts[topic]):
            tid = f"T{idx:04d}"
            length = rng.randint(3, 10)  # total steps including the terminal
            answer = str(rng.randint(10, 999))
            steps = [
                f"Apply {topic} rule {d + 1} to narrow down task {tid}."
                for d in range(length - 1)
            ]
            steps.append(f"The answer is {answer}.")
            distractors = [
                [
                    f"Misapply {topic} rule {d + 1} on task {tid} (variant {v})."
                    for v in (1, 2)
                ]
                for d in range(length - 1)
            ]
            wrong = sorted({str(int(answer) + delta) for delta in (1, 3, 7)} - {answer})
            tasks.append(SyntheticTask(tid, topic, steps, answer, distractors, wrong))
            idx += 1
    return tasks


def task_to_question(task: SyntheticTask) -> QuestionRecord:
    spec = {
        "id": task.id,
        "topic": task.topic,
        "steps": task.canonical_steps,
        "distractors": task.distractors,
        "wrong": task.wrong_answers,
    }
    text = (
        f"Synthetic reasoning task {task.id} (topic: {task.topic}). "
        "Derive the answer step by step.\n" + encode_taskspec(spec)
    )
    return QuestionRecord(
        id=task.id, text=text, ground_truth=task.ground_truth, topic=task.topic
    )


def complementary_profiles(topics: Sequence[str], step_accuracy: float = 0.8,
                           base_seed: int = 0) -> list[PolicyDescriptor]:
    """One scripted model per topic, each knowing exactly its own topic, so
    ensemble coverage grows with every added member."""
    from .backends import SCRIPTED, SimProfile

    return [
        PolicyDescriptor(
            name=f"sim-{topic}",
            kind=SCRIPTED,
            profile=SimProfile(
                knowledge_topics=frozenset({topic}),
                step_accuracy={topic: step_accuracy},
                rng_seed=base_seed + i,
            ),
        )
        for i, topic in enumerate(topics)
    ]


def vanilla_mcts_search(
    question: QuestionRecord,
    backend: PolicyBackend,
    config: SearchConfig,
    rng_seed: int = 0,
) -> SearchOutcome:
    """Single-model baseline: each iteration expands exactly one child step
    under the start node, scores it with the same single model, then updates
    and selects per the shared rules."""
    from .backends import BackendError

    tree = ReasoningTree(
        question=question.text,
        ground_truth=question.ground_truth,
        question_id=question.id,
        image=question.image,
        rng_seed=rng_seed,
    )
    telemetry: list[dict] = []
    one_step_config = replace(config, candidates_per_model=1, request_concurrency=1)
    succeeded = False
    path = None
    iterations_used = 0
    start = tree.root_id
    for iteration in range(1, config.max_iterations + 1):
        iterations_used = iteration
        stats = {"iteration": iteration, "nodes_added": 0, "nodes_pruned": 0}
        chains = []
        try:
            result = backend.generate_continuation(question, tree.prefix_steps(start))
        except BackendError:
            stats["generation_failures"] = 1
        else:
            text, terminal = result.steps[0]
            nid = tree.add_child(start, text, backend.name, terminal)
            stats["nodes_added"] = 1
            chains = [[nid]]
        retained = simulate_and_prune(tree, chains, [backend], one_step_config, None, stats)
        backpropagate(tree, retained)
        telemetry.append(stats)
        path = find_effective_path(tree)
        if path is not None:
            succeeded = True
            break
        nxt = select(tree, retained, config)
        if nxt is None:
            break
        start = nxt
    return SearchOutcome(tree, path, iterations_used, succeeded, telemetry)


def _method_result(name: str, outcomes: list[tuple[str, SearchOutcome]],
                   config: SearchConfig) -> MethodResult:
    successes = sum(1 for _, o in outcomes if o.succeeded)
    iteration_cost = [
        o.iterations_used if o.succeeded else config.max_iterations for _, o in outcomes
    ]
    return MethodResult(
        name=name,
        success_rate=successes / len(outcomes),
        avg_iterations=sum(iteration_cost) / len(iteration_cost),
        outcomes=[
            {"id": qid, "succeeded": o.succeeded, "iterations": o.iterations_used}
            for qid, o in outcomes
        ],
    )


def _run_collective(
    questions: list[QuestionRecord],
    descriptors: list[PolicyDescriptor],
    config: SearchConfig,
    seed: int,
    workers: int,
) -> list[tuple[str, SearchOutcome]]:
    def one(question: QuestionRecord) -> tuple[str, SearchOutcome]:
        ensemble = make_ensemble(descriptors, run_seed=seed)
        outcome = search(question, ensemble, config, rng_seed=_derive_seed(seed, question.id))
        return question.id, outcome

    if workers <= 1:
        return [one(q) for q in questions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, questions))


def run_bench(
    world: list[SyntheticTask],
    methods: Sequence[str],
    descriptors: list[PolicyDescriptor],
    config: SearchConfig,
    seed: int,
    ablation: bool = True,
    workers: int = 1,
) -> BenchReport:
    """Run each requested method over the whole world with shared seeds and,
    optionally, the ensemble-prefix ablation sweep."""
    if not world:
        raise WorldConfigError("empty world")
    unknown = set(methods) - {"comcts", "vanilla"}
    if unknown:
        raise WorldConfigError(f"unknown methods {sorted(unknown)}")
    questions = [task_to_question(t) for t in world]
    results: dict[str, MethodResult] = {}
    if "comcts" in methods:
        outcomes = _run_collective(questions, descriptors, config, seed, workers)
        results["comcts"] = _method_result("comcts", outcomes, config)
    if "vanilla" in methods:
        def one(question: QuestionRecord) -> tuple[str, SearchOutcome]:
            backend = make_backend(descriptors[0], run_seed=seed)
            outcome = vanilla_mcts_search(
                question, backend, config, rng_seed=_derive_seed(seed, question.id)
            )
            return question.id, outcome

        if workers <= 1:
            outcomes = [one(q) for q in questions]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(one, questions))
        results["vanilla"] = _method_result("vanilla", outcomes, config)
    ablation_rows = []
    if ablation:
        for k in range(1, len(descriptors) + 1):
            outcomes = _run_collective(questions, descriptors[:k], config, seed, workers)
            successes = sum(1 for _, o in outcomes if o.succeeded)
            ablation_rows.append(
                {"ensemble_size": k, "success_rate": successes / len(outcomes)}
            )
    config_snapshot = {
        "max_iterations": config.max_iterations,
        "threshold_t": config.threshold_t,
        "exploration_c": config.exploration_c,
        "candidates_per_model": config.candidates_per_model,
        "ensemble": [d.name for d in descriptors],
        "n_tasks": len(world),
        "methods": sorted(methods),
    }
    return BenchReport(methods=results, ablation=ablation_rows, config=config_snapshot, seed=seed)


def render_report(report: BenchReport) -> str:
    lines = [
        f"benchmark seed {report.seed}; avg iterations over {report.avg_iterations_denominator}",
        f"{'method':<10} {'success_rate':>12} {'avg_iterations':>15}",
    ]
    for name, m in sorted(report.methods.items()):
        lines.append(f"{name:<10} {m.success_rate:>12.3f} {m.avg_iterations:>15.2f}")
    if report.ablation:
        lines.append("")
        lines.append(f"{'ensemble_size':>13} {'success_rate':>13}")
        for row in report.ablation:
            lines.append(f"{row['ensemble_size']:>13d} {row['success_rate']:>13.3f}")
    return "\n".join(lines)
