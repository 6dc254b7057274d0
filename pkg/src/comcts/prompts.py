"""Default prompt templates, overridable from plain-text files.

Templates use str.format placeholders: {question}, {prefix}, {candidate}.
"""
from __future__ import annotations

from dataclasses import dataclass

DEFAULT_GENERATE = """\
You are solving the following task step by step.

Task: {question}

Steps taken so far:
{prefix}

Continue the reasoning from here. Write each new step on its own line as
"### Step N: <one reasoning step>" and finish with
"### Final Answer: <the answer>".
"""

DEFAULT_EVALUATE = """\
You are verifying one step of a step-by-step solution.

Task: {question}

Steps taken so far:
{prefix}

Candidate next step:
{candidate}

Judge whether the candidate step is correct and useful. Reply with a single
line "Score: <x>" where x is a number in [-1, 1] (-1 clearly wrong,
1 clearly correct).
"""

DEFAULT_REFLECT = "The previous reasoning step is wrong and let's rethink it again."


@dataclass
class PromptSet:
    generate: str = DEFAULT_GENERATE
    evaluate: str = DEFAULT_EVALUATE
    reflect: str = DEFAULT_REFLECT


def load_template(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()
