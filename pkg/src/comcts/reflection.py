"""Reflective path construction from a finished reasoning tree.

A reflective path is the effective path with one step prefixed by its
weakest (minimum-UCB) sibling and a reflection sentence, modeling an
error-then-correction transition. Pruned siblings are deliberately eligible:
they are the identified negatives.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass

from .prompts import DEFAULT_REFLECT
from .tree import ReasoningTree

log = logging.getLogger(__name__)


class ReflectionError(ValueError):
    pass


@dataclass
class ReflectivePath:
    base_path: list[str]  # effective path step texts, root excluded
    replaced_index: int  # index into base_path of the corrected step
    replaced_node_id: int
    negative_node_id: int
    negative_text: str
    reflect_prompt: str
    sequence: list[str]  # base_path with (negative, prompt, step) spliced in

    def to_dict(self) -> dict:
        return {
            "base_path": self.base_path,
            "replaced_index": self.replaced_index,
            "replaced_node_id": self.replaced_node_id,
            "negative_node_id": self.negative_node_id,
            "negative_text": self.negative_text,
            "reflect_prompt": self.reflect_prompt,
            "sequence": self.sequence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReflectivePath":
        return cls(**d)


def negative_sibling(tree: ReasoningTree, node_id: int, c: float) -> int | None:
    """Minimum-UCB sibling of node_id (pruned siblings included), ties to the
    lowest id; None when the node has no siblings.

    Subtracting the node's own UCB from each sibling's, as the selection rule
    is written, shifts every key by the same constant and cannot change the
    argmin, so the bare sibling UCBs are compared directly.
    """
    node = tree.node(node_id)
    if node.parent_id is None:
        raise ReflectionError("root has no siblings")
    best, best_u = None, None
    for sib in sorted(tree.siblings_of(node_id, include_pruned=True), key=lambda n: n.id):
        u = tree.ucb(sib.id, c)
        if best_u is None or u < best_u:
            best, best_u = sib.id, u
    return best


def build_reflective_path(
    tree: ReasoningTree,
    effective_path: list[int],
    seed: int,
    c: float,
    reflect_prompt: str = DEFAULT_REFLECT,
) -> ReflectivePath | None:
    """Sample one step of the effective path that has siblings and splice in
    its negative sibling plus the reflection sentence. None when the path is
    unbranched everywhere. Never mutates the tree."""
    step_ids = [nid for nid in effective_path if tree.node(nid).parent_id is not None]
    eligible = [
        nid for nid in step_ids if tree.siblings_of(nid, include_pruned=True)
    ]
    if not eligible:
        return None
    rng = random.Random(seed)
    chosen = rng.choice(eligible)
    neg = negative_sibling(tree, chosen, c)
    base_path = [tree.node(nid).step_text for nid in step_ids]
    idx = step_ids.index(chosen)
    neg_text = tree.node(neg).step_text
    sequence = base_path[:idx] + [neg_text, reflect_prompt] + base_path[idx:]
    return ReflectivePath(
        base_path=base_path,
        replaced_index=idx,
        replaced_node_id=chosen,
        negative_node_id=neg,
        negative_text=neg_text,
        reflect_prompt=reflect_prompt,
        sequence=sequence,
    )


def sample_reflection_subset(records, count_or_ratio, seed: int):
    """Seeded uniform sample (without replacement) of the reflection-eligible
    records. A float in (0, 1] is a ratio of the eligible population, an int
    is an absolute count; oversized requests return everything with a warning.
    """
    from .dataset_io import reflection_eligible

    if count_or_ratio <= 0:
        raise ValueError("count_or_ratio must be positive")
    eligible = [r for r in records if reflection_eligible(r)]
    if isinstance(count_or_ratio, float) and count_or_ratio <= 1.0:
        count = int(round(count_or_ratio * len(eligible)))
    else:
        count = int(count_or_ratio)
    if count > len(eligible):
        log.warning(
            "requested %d reflective records but only %d are eligible; returning all",
            count,
            len(eligible),
        )
        return list(eligible)
    indices = sorted(random.Random(seed).sample(range(len(eligible)), count))
    return [eligible[i] for i in indices]
