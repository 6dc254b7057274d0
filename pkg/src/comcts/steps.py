"""Step-sequence grammar: rendering, parsing, scoring and answer matching.

Reasoning steps travel between the engine and the policy backends as plain
text delimited by "### Step N:" / "### Final Answer:" lines. Everything that
touches that grammar lives here so the round trip stays in one place.
"""
from __future__ import annotations

import re

STEP_LINE = re.compile(r"^### Step (\d+):\s*(.*)$")
FINAL_LINE = re.compile(r"^### Final Answer:\s*(.*)$")

# Marks a paragraph/step that states a final answer (fallback segmentation
# and "prefix already terminal" detection).
ANSWER_MARKER = re.compile(r"(?:final answer|\banswer\b)\s*(?:is\b|:)", re.IGNORECASE)

_SCORE = re.compile(r"Score:\s*(-?(?:\d+\.?\d*|\.\d+))", re.IGNORECASE)
_ANSWER_TAIL = re.compile(
    r"(?:final answer|\banswer\b)\s*(?:is\b|:)\s*(.+)", re.IGNORECASE | re.DOTALL
)


class StepParseError(ValueError):
    """Model output yields zero parseable reasoning steps."""


class ScoreParseError(ValueError):
    """Evaluation reply contains no 'Score: <x>' token."""


Step = tuple[str, bool]  # (step_text, is_terminal)


def parse_steps(raw_text: str) -> list[Step]:
    """Segment raw model output into (text, is_terminal) steps.

    Primary grammar: lines starting "### Step N:" open a step, a line
    starting "### Final Answer:" opens the unique terminal step (anything
    after it is folded into that step). Without any delimiter, falls back to
    blank-line paragraphs, marking the last one terminal only when it carries
    an answer marker.
    """
    if not raw_text or not raw_text.strip():
        raise StepParseError("empty generation")
    segments: list[tuple[bool, list[str]]] = []
    current: tuple[bool, list[str]] | None = None
    saw_delim = False
    final_seen = False
    for line in raw_text.splitlines():
        if final_seen:
            current[1].append(line)  # type: ignore[index]
            continue
        m = STEP_LINE.match(line)
        if m:
            current = (False, [m.group(2)])
            segments.append(current)
            saw_delim = True
            continue
        m = FINAL_LINE.match(line)
        if m:
            current = (True, [m.group(1)])
            segments.append(current)
            saw_delim = True
            final_seen = True
            continue
        if current is not None:
            current[1].append(line)
    if saw_delim:
        steps = []
        for is_final, content in segments:
            text = "\n".join(content).strip()
            if text:
                steps.append((text, is_final))
        if not steps:
            raise StepParseError("delimiters present but every step is empty")
        return steps
    paragraphs = [p.strip() for p in re.split(r"\n\s*\n", raw_text) if p.strip()]
    steps = [(p, False) for p in paragraphs]
    if ANSWER_MARKER.search(steps[-1][0]):
        steps[-1] = (steps[-1][0], True)
    return steps


def render_steps(steps: list[Step]) -> str:
    """Render steps with the canonical delimiters (inverse of parse_steps)."""
    out = []
    n = 1
    for text, terminal in steps:
        if terminal:
            out.append(f"### Final Answer: {text}")
        else:
            out.append(f"### Step {n}: {text}")
            n += 1
    return "\n".join(out)


def parse_score(raw_text: str) -> float:
    """Extract the first 'Score: <x>' number, clamped to [-1, 1]."""
    m = _SCORE.search(raw_text or "")
    if not m:
        raise ScoreParseError(f"no score token in reply: {raw_text!r}")
    return max(-1.0, min(1.0, float(m.group(1))))


def extract_answer(step_text: str) -> str:
    """Pull the answer payload out of a terminal step's text."""
    m = _ANSWER_TAIL.search(step_text)
    if m:
        return m.group(1).strip()
    return step_text.strip()


def _normalize(text: str) -> str:
    t = text.strip()
    t = t.strip("()[]{}<>.,:;!?\"'` \t\n")
    t = re.sub(r"\s+", " ", t)
    return t.casefold()


def match_answer(predicted: str, ground_truth: str) -> bool:
    """Normalized answer equality; numerals compare numerically."""
    p, g = _normalize(predicted), _normalize(ground_truth)
    try:
        return float(p) == float(g)
    except ValueError:
        return p == g
