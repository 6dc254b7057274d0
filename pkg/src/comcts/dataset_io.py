"""Question ingestion, search-record serialization, SFT flattening and
step-count analytics.

Records are line-delimited JSON with a fixed field order and compact
separators, so equal records serialize to equal bytes (golden tests and the
determinism checks rely on this).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

from .reflection import ReflectivePath
from .steps import Step, render_steps
from .tree import ReasoningNode, ReasoningTree

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    pass


class QuestionFormatError(DatasetError):
    pass


class RecordFormatError(DatasetError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class QuestionRecord:
    id: str
    text: str
    ground_truth: str
    image: str | None = None
    topic: str | None = None


@dataclass
class SearchRecord:
    question: QuestionRecord
    tree: ReasoningTree
    effective_path: list[str] | None  # step texts, root excluded
    effective_path_ids: list[int] | None
    reflective_path: ReflectivePath | None
    telemetry: dict = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return bool(self.telemetry.get("succeeded"))


@dataclass
class StepStats:
    histogram: dict[int, int]
    mean: float
    count: int
    group_key: str | None = None


# ---------------------------------------------------------------- questions


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def load_questions(path: str) -> Iterator[QuestionRecord]:
    """Stream validated question records from a JSONL file.

    Malformed lines, missing required fields and duplicate ids raise
    QuestionFormatError naming the offending line(s).
    """
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise QuestionFormatError(f"line {line_no}: invalid JSON ({exc})") from exc
            if not isinstance(raw, dict):
                raise QuestionFormatError(f"line {line_no}: expected an object")
            unknown = set(raw) - {"id", "text", "image", "ground_truth", "topic"}
            if unknown:
                raise QuestionFormatError(
                    f"line {line_no}: unknown fields {sorted(unknown)}"
                )
            for key in ("id", "text", "ground_truth"):
                if not raw.get(key) or not str(raw[key]).strip():
                    raise QuestionFormatError(f"line {line_no}: missing or empty {key!r}")
            qid = str(raw["id"])
            if qid in seen:
                raise QuestionFormatError(
                    f"line {line_no}: duplicate id {qid!r} (first seen on line {seen[qid]})"
                )
            seen[qid] = line_no
            yield QuestionRecord(
                id=qid,
                text=raw["text"],
                ground_truth=str(raw["ground_truth"]),
                image=raw.get("image"),
                topic=raw.get("topic"),
            )


def question_to_dict(q: QuestionRecord) -> dict:
    return {
        "id": q.id,
        "text": q.text,
        "ground_truth": q.ground_truth,
        "image": q.image,
        "topic": q.topic,
    }


def question_from_dict(d: dict) -> QuestionRecord:
    return QuestionRecord(
        id=d["id"],
        text=d["text"],
        ground_truth=d["ground_truth"],
        image=d.get("image"),
        topic=d.get("topic"),
    )


# -------------------------------------------------------------------- trees


def node_to_dict(n: ReasoningNode) -> dict:
    return {
        "id": n.id,
        "step_text": n.step_text,
        "origin_model": n.origin_model,
        "parent_id": n.parent_id,
        "score_r": n.score_r,
        "value_v": n.value_v,
        "visits_n": n.visits_n,
        "is_terminal": n.is_terminal,
        "pruned": n.pruned,
        "child_ids": n.child_ids,
    }


def tree_to_dict(t: ReasoningTree) -> dict:
    return {
        "question_id": t.question_id,
        "question": t.question,
        "ground_truth": t.ground_truth,
        "image": t.image,
        "rng_seed": t.rng_seed,
        "root_id": t.root_id,
        "nodes": [node_to_dict(t.nodes[i]) for i in sorted(t.nodes)],
    }


def tree_from_dict(d: dict) -> ReasoningTree:
    nodes = {
        n["id"]: ReasoningNode(
            id=n["id"],
            step_text=n["step_text"],
            origin_model=n["origin_model"],
            parent_id=n["parent_id"],
            score_r=n["score_r"],
            value_v=n["value_v"],
            visits_n=n["visits_n"],
            is_terminal=n["is_terminal"],
            pruned=n["pruned"],
            child_ids=list(n["child_ids"]),
        )
        for n in d["nodes"]
    }
    return ReasoningTree(
        question=d["question"],
        ground_truth=d["ground_truth"],
        question_id=d["question_id"],
        image=d["image"],
        rng_seed=d["rng_seed"],
        nodes=nodes,
        root_id=d["root_id"],
    )


# ------------------------------------------------------------------ records


def record_to_json(record: SearchRecord) -> str:
    return _dumps(
        {
            "schema_version": SCHEMA_VERSION,
            "question": question_to_dict(record.question),
            "tree": tree_to_dict(record.tree),
            "effective_path": record.effective_path,
            "effective_path_ids": record.effective_path_ids,
            "reflective_path": (
                record.reflective_path.to_dict() if record.reflective_path else None
            ),
            "telemetry": record.telemetry,
        }
    )


def record_from_json(text: str) -> SearchRecord:
    d = json.loads(text)
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {version!r}")
    return SearchRecord(
        question=question_from_dict(d["question"]),
        tree=tree_from_dict(d["tree"]),
        effective_path=d["effective_path"],
        effective_path_ids=d["effective_path_ids"],
        reflective_path=(
            ReflectivePath.from_dict(d["reflective_path"])
            if d.get("reflective_path")
            else None
        ),
        telemetry=d["telemetry"],
    )


def write_records(path_or_file: str | IO[str], records: Iterable[SearchRecord]) -> int:
    """Write records one JSON document per line; each line is written and
    flushed atomically so an interrupted run leaves only whole lines."""

    def _write(f) -> int:
        n = 0
        for record in records:
            f.write(record_to_json(record) + "\n")
            f.flush()
            n += 1
        return n

    if isinstance(path_or_file, str):
        with open(path_or_file, "w", encoding="utf-8") as f:
            return _write(f)
    return _write(path_or_file)


def read_records(
    path: str, error_sink: list[RecordFormatError] | None = None
) -> Iterator[SearchRecord]:
    """Stream records back. Corrupt lines raise, or are collected into
    error_sink (with their line number) while the rest of the file streams."""
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield record_from_json(line)
            except (json.JSONDecodeError, DatasetError, KeyError, TypeError) as exc:
                err = RecordFormatError(line_no, str(exc))
                if error_sink is None:
                    raise err from exc
                error_sink.append(err)


# ------------------------------------------------------------ SFT flattening


def _terminal_last(texts: list[str]) -> list[Step]:
    return [(t, i == len(texts) - 1) for i, t in enumerate(texts)]


def render_question_prompt(question: QuestionRecord) -> str:
    prompt = question.text
    if question.image:
        prompt += f"\nImage: {question.image}"
    return prompt


def flatten_for_sft(record: SearchRecord, which: str = "effective") -> tuple[str, str]:
    """Render one training sample: prompt = question, target = the requested
    path with canonical step delimiters (reflective targets carry the
    negative step and the reflection sentence in order)."""
    if which == "effective":
        if not record.effective_path:
            raise DatasetError("record has no effective path")
        texts = record.effective_path
    elif which == "reflective":
        if record.reflective_path is None:
            raise DatasetError("record has no reflective path")
        texts = record.reflective_path.sequence
    else:
        raise DatasetError(f"unknown path kind {which!r}")
    return render_question_prompt(record.question), render_steps(_terminal_last(texts))


def reflection_eligible(record: SearchRecord) -> bool:
    """A record can host a reflective path iff it succeeded and some step of
    its effective path has at least one sibling (pruned ones count)."""
    if not record.succeeded or not record.effective_path_ids:
        return False
    tree = record.tree
    return any(
        tree.siblings_of(nid, include_pruned=True)
        for nid in record.effective_path_ids
        if tree.node(nid).parent_id is not None
    )


# ---------------------------------------------------------------- analytics


def step_stats(
    records: Iterable[SearchRecord], group_by_topic: bool = False
) -> list[StepStats]:
    """Histogram and mean of effective-path length, optionally per topic.
    Records without an effective path are skipped."""
    groups: dict[str | None, list[int]] = {}
    for record in records:
        if not record.effective_path:
            continue
        key = record.question.topic if group_by_topic else None
        groups.setdefault(key, []).append(len(record.effective_path))
    if not groups:
        raise DatasetError("no records with an effective path")
    out = []
    for key in sorted(groups, key=lambda k: (k is not None, k)):
        lengths = groups[key]
        histogram: dict[int, int] = {}
        for length in lengths:
            histogram[length] = histogram.get(length, 0) + 1
        out.append(
            StepStats(
                histogram=dict(sorted(histogram.items())),
                mean=sum(lengths) / len(lengths),
                count=len(lengths),
                group_key=key,
            )
        )
    return out
