"""The collective search loop over reasoning trees.

One iteration = joint expansion by every ensemble model, collective
simulation with error positioning, bottom-up statistics update, then
UCB-guided selection of the next start node. The loop stops as soon as a
retained terminal node matches the ground truth, or at the iteration budget.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

from .backends import BackendError, PolicyBackend
from .steps import extract_answer, match_answer
from .tree import ReasoningTree

if TYPE_CHECKING:
    from .dataset_io import QuestionRecord

__all__ = [
    "SearchConfig",
    "SearchOutcome",
    "EngineError",
    "expand",
    "simulate_and_prune",
    "backpropagate",
    "select",
    "search",
    "match_answer",
]


class EngineError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    max_iterations: int = 20
    threshold_t: float = 0.0
    exploration_c: float = math.sqrt(2)
    candidates_per_model: int = 1
    request_concurrency: int = 4  # in-flight backend requests per search

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.exploration_c <= 0:
            raise ValueError("exploration_c must be > 0")
        if self.candidates_per_model < 1:
            raise ValueError("candidates_per_model must be positive")
        if self.request_concurrency < 1:
            raise ValueError("request_concurrency must be positive")


@dataclass
class SearchOutcome:
    tree: ReasoningTree
    effective_path: list[int] | None  # node ids, root first
    iterations_used: int
    succeeded: bool
    telemetry: list[dict] = field(default_factory=list)

    def effective_steps(self) -> list[str]:
        if self.effective_path is None:
            return []
        return [self.tree.node(nid).step_text for nid in self.effective_path[1:]]


def _run_jobs(jobs: Sequence[Callable[[], object]], executor: ThreadPoolExecutor | None):
    """Run jobs, concurrently when an executor is given; results keep job order
    and exceptions are returned in place rather than raised."""

    def guarded(job):
        try:
            return job()
        except BackendError as exc:
            return exc

    if executor is None or len(jobs) <= 1:
        return [guarded(j) for j in jobs]
    return list(executor.map(guarded, jobs))


def expand(
    tree: ReasoningTree,
    start_id: int,
    ensemble: Sequence[PolicyBackend],
    config: SearchConfig,
    executor: ThreadPoolExecutor | None = None,
    stats: dict | None = None,
) -> list[list[int]]:
    """Grow candidate chains under start: one full continuation per model per
    candidate slot, each added as a child chain. Returns the chains in
    ensemble order; backend failures drop that model's contribution."""
    start = tree.node(start_id)
    if start.pruned:
        raise EngineError(f"cannot expand pruned node {start_id}")
    if start.is_terminal:
        raise EngineError("cannot expand terminal node")
    question = _tree_question(tree)
    prefix = tree.prefix_steps(start_id)

    def gen_job(backend: PolicyBackend):
        # candidates from one backend are drawn sequentially so its internal
        # sampling state stays deterministic under concurrency
        results = []
        for _ in range(config.candidates_per_model):
            try:
                results.append(backend.generate_continuation(question, prefix))
            except BackendError as exc:
                results.append(exc)
        return results

    per_backend = _run_jobs([lambda b=b: gen_job(b) for b in ensemble], executor)
    chains: list[list[int]] = []
    for backend, results in zip(ensemble, per_backend):
        if isinstance(results, BackendError):
            results = [results]
        for result in results:
            if isinstance(result, BackendError):
                if stats is not None:
                    stats["generation_failures"] = stats.get("generation_failures", 0) + 1
                continue
            chain = []
            parent = start_id
            for text, terminal in result.steps:
                parent = tree.add_child(parent, text, backend.name, terminal)
                chain.append(parent)
            if chain:
                chains.append(chain)
    if stats is not None:
        stats["nodes_added"] = stats.get("nodes_added", 0) + sum(len(c) for c in chains)
    return chains


def simulate_and_prune(
    tree: ReasoningTree,
    chains: Sequence[Sequence[int]],
    ensemble: Sequence[PolicyBackend],
    config: SearchConfig,
    executor: ThreadPoolExecutor | None = None,
    stats: dict | None = None,
) -> set[int]:
    """Score every fresh candidate node with the whole ensemble and prune.

    R(node) is the mean of the successful votes; failed votes shrink the
    denominator. Nodes with R below the threshold (or with zero votes) are
    pruned together with their descendants, which drop out even when their
    own score clears the threshold.
    """
    question = _tree_question(tree)
    node_ids = [nid for chain in chains for nid in chain]
    jobs = []
    for nid in node_ids:
        node = tree.node(nid)
        prefix = tree.prefix_steps(nid)[:-1]
        for backend in ensemble:
            jobs.append(
                lambda b=backend, p=prefix, c=node.step_text: b.evaluate_node(question, p, c)
            )
    votes = _run_jobs(jobs, executor)
    k = len(ensemble)
    for i, nid in enumerate(node_ids):
        node_votes = [v for v in votes[i * k : (i + 1) * k] if not isinstance(v, BackendError)]
        failed = k - len(node_votes)
        if stats is not None and failed:
            stats["evaluation_failures"] = stats.get("evaluation_failures", 0) + failed
        tree.node(nid).score_r = (
            sum(node_votes) / len(node_votes) if node_votes else None
        )
    retained: set[int] = set()
    pruned_count = 0
    for chain in chains:
        discontinued = False
        for nid in chain:
            node = tree.node(nid)
            if discontinued or node.score_r is None or node.score_r < config.threshold_t:
                if not node.pruned:
                    tree.prune(nid)
                pruned_count += 1
                discontinued = True
            else:
                retained.add(nid)
    if stats is not None:
        stats["nodes_pruned"] = stats.get("nodes_pruned", 0) + pruned_count
    return retained


def backpropagate(tree: ReasoningTree, retained: set[int]) -> None:
    """Fold the fresh scores of retained candidates into their parents'
    running (V, N) statistics, bottom-up. Parents gaining no retained child
    this round are untouched."""
    by_parent: dict[int, list[float]] = {}
    for nid in sorted(retained):
        node = tree.node(nid)
        by_parent.setdefault(node.parent_id, []).append(node.score_r)
    for pid in sorted(by_parent, key=lambda p: -tree.depth(p)):
        scores = by_parent[pid]
        parent = tree.node(pid)
        count = len(scores)
        parent.value_v = (parent.visits_n * parent.value_v + sum(scores)) / (
            parent.visits_n + count
        )
        parent.visits_n += count


def _ucb_or_root_value(tree: ReasoningTree, nid: int, c: float) -> float:
    # the root has no parent; its selection key is its bare value, matching
    # the zero-exploration convention for unvisited parents
    if tree.node(nid).parent_id is None:
        return tree.node(nid).value_v
    return tree.ucb(nid, c)


def _argmax_lowest_id(tree: ReasoningTree, candidates: list[int], c: float) -> int:
    best, best_u = None, None
    for nid in sorted(candidates):
        u = _ucb_or_root_value(tree, nid, c)
        if best_u is None or u > best_u:
            best, best_u = nid, u
    return best


def select(
    tree: ReasoningTree, latest_retained: set[int], config: SearchConfig
) -> int | None:
    """Pick the next start node: highest UCB among the latest retained
    candidates, falling back to the whole retained expandable frontier when
    the round retained nothing. None signals an exhausted tree."""
    candidates = [
        nid
        for nid in latest_retained
        if not tree.node(nid).pruned and not tree.node(nid).is_terminal
    ]
    if not candidates:
        candidates = [
            n.id
            for n in tree.retained_nodes()
            if not n.is_terminal
            and not any(not tree.node(c).pruned for c in n.child_ids)
        ]
    if not candidates:
        return None
    return _argmax_lowest_id(tree, candidates, config.exploration_c)


def find_effective_path(tree: ReasoningTree) -> list[int] | None:
    """Lowest-id retained terminal whose answer matches the ground truth."""
    for nid in sorted(tree.nodes):
        node = tree.nodes[nid]
        if node.is_terminal and not node.pruned and match_answer(
            extract_answer(node.step_text), tree.ground_truth
        ):
            return [n.id for n in tree.path_to_root(nid)]
    return None


def _tree_question(tree: ReasoningTree) -> "QuestionRecord":
    from .dataset_io import QuestionRecord

    return QuestionRecord(
        id=tree.question_id,
        text=tree.question,
        ground_truth=tree.ground_truth,
        image=tree.image,
    )


def search(
    question: "QuestionRecord",
    ensemble: Sequence[PolicyBackend],
    config: SearchConfig,
    rng_seed: int = 0,
) -> SearchOutcome:
    if not question.text or not question.text.strip():
        raise EngineError("empty question")
    if not question.ground_truth or not str(question.ground_truth).strip():
        raise EngineError("missing ground truth")
    if not ensemble:
        raise EngineError("empty ensemble")
    tree = ReasoningTree(
        question=question.text,
        ground_truth=question.ground_truth,
        question_id=question.id,
        image=question.image,
        rng_seed=rng_seed,
    )
    telemetry: list[dict] = []
    executor = (
        ThreadPoolExecutor(max_workers=config.request_concurrency)
        if config.request_concurrency > 1
        else None
    )
    succeeded = False
    path: list[int] | None = None
    iterations_used = 0
    start = tree.root_id
    try:
        for iteration in range(1, config.max_iterations + 1):
            iterations_used = iteration
            stats = {"iteration": iteration, "nodes_added": 0, "nodes_pruned": 0}
            chains = expand(tree, start, ensemble, config, executor, stats)
            retained = simulate_and_prune(tree, chains, ensemble, config, executor, stats)
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
    finally:
        if executor is not None:
            executor.shutdown(wait=False)
    return SearchOutcome(tree, path, iterations_used, succeeded, telemetry)
