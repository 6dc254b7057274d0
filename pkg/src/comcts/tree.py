"""Reasoning tree data model and structural queries.

A tree holds one question and every reasoning step proposed for it across
search iterations. Nodes are never deleted: error positioning marks them
pruned so the emitted tree keeps its negative material for reflection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

ROOT_MODEL = "root"


class TreeError(ValueError):
    """Structural misuse: unknown ids, pruned parents, root-only queries."""


@dataclass
class ReasoningNode:
    id: int
    step_text: str
    origin_model: str
    parent_id: int | None
    score_r: float | None = None  # collective score, absent until simulated
    value_v: float = 0.0
    visits_n: int = 0
    is_terminal: bool = False
    pruned: bool = False
    child_ids: list[int] = field(default_factory=list)


@dataclass
class ReasoningTree:
    question: str
    ground_truth: str
    question_id: str = ""
    image: str | None = None
    rng_seed: int = 0
    nodes: dict[int, ReasoningNode] = field(default_factory=dict)
    root_id: int = 0

    def __post_init__(self) -> None:
        if not self.nodes:
            self.nodes[self.root_id] = ReasoningNode(
                self.root_id, "", ROOT_MODEL, None
            )
        self._next_id = max(self.nodes) + 1

    @property
    def root(self) -> ReasoningNode:
        return self.nodes[self.root_id]

    def node(self, node_id: int) -> ReasoningNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TreeError(f"unknown node id {node_id}") from None

    def add_child(
        self,
        parent_id: int,
        step_text: str,
        origin_model: str,
        is_terminal: bool = False,
    ) -> int:
        parent = self.node(parent_id)
        if parent.pruned:
            raise TreeError(f"parent {parent_id} is pruned")
        nid = self._next_id
        self._next_id += 1
        self.nodes[nid] = ReasoningNode(nid, step_text, origin_model, parent_id,
                                        is_terminal=is_terminal)
        parent.child_ids.append(nid)
        return nid

    def path_to_root(self, node_id: int) -> list[ReasoningNode]:
        """Root-first node list from the root down to node_id inclusive."""
        path = []
        cur: int | None = self.node(node_id).id
        while cur is not None:
            node = self.nodes[cur]
            path.append(node)
            cur = node.parent_id
        path.reverse()
        return path

    def depth(self, node_id: int) -> int:
        return len(self.path_to_root(node_id)) - 1

    def prefix_steps(self, node_id: int) -> list[str]:
        """Step texts from just below the root down to node_id."""
        return [n.step_text for n in self.path_to_root(node_id)[1:]]

    def siblings_of(
        self, node_id: int, include_pruned: bool = False
    ) -> list[ReasoningNode]:
        node = self.node(node_id)
        if node.parent_id is None:
            raise TreeError("root has no siblings")
        parent = self.nodes[node.parent_id]
        return [
            self.nodes[cid]
            for cid in parent.child_ids
            if cid != node_id and (include_pruned or not self.nodes[cid].pruned)
        ]

    def ucb(self, node_id: int, c: float) -> float:
        """V(s) + c * sqrt(log N(parent) / (1 + N(s))).

        A never-visited parent contributes no exploration term (log 0 is
        undefined; the case only occurs before the first backpropagation
        reaches the parent).
        """
        node = self.node(node_id)
        if node.parent_id is None:
            raise TreeError("root has no UCB value")
        parent = self.nodes[node.parent_id]
        if parent.visits_n == 0:
            exploration = 0.0
        else:
            exploration = c * math.sqrt(
                math.log(parent.visits_n) / (1 + node.visits_n)
            )
        return node.value_v + exploration

    def prune(self, node_id: int) -> None:
        """Mark node_id and every descendant pruned; ids stay stable."""
        stack = [self.node(node_id).id]
        while stack:
            node = self.nodes[stack.pop()]
            node.pruned = True
            stack.extend(node.child_ids)

    def retained_nodes(self) -> list[ReasoningNode]:
        return [self.nodes[i] for i in sorted(self.nodes) if not self.nodes[i].pruned]
