"""Policy backends: the generate/evaluate abstraction over ensemble models.

Two kinds ship: a deterministic scripted simulator driven by a behavior
profile (desk-scale experiments), and an HTTP client speaking the
chat-completions wire shape (real model services).
"""
from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import requests

from .prompts import PromptSet
from .steps import (
    ANSWER_MARKER,
    ScoreParseError,
    Step,
    StepParseError,
    parse_score,
    parse_steps,
    render_steps,
)

if TYPE_CHECKING:
    from .dataset_io import QuestionRecord

SCRIPTED = "scripted-simulator"
HTTP_CHAT = "http-chat"

TASKSPEC_RE = re.compile(r"^TASKSPEC (\{.*\})$", re.MULTILINE)

RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


class BackendError(RuntimeError):
    """A backend request failed for good (after retries, if applicable)."""


@dataclass
class SimProfile:
    """Behavior profile of a scripted simulator model.

    knowledge_topics gates generation: the simulator can only produce
    on-track steps for topics it knows, with per-topic step_accuracy.
    eval_noise is the probability that a single evaluation vote flips sign.
    """

    knowledge_topics: frozenset[str] = frozenset()
    step_accuracy: dict[str, float] = field(default_factory=dict)
    eval_noise: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.knowledge_topics = frozenset(self.knowledge_topics)
        for topic, p in self.step_accuracy.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"step_accuracy[{topic!r}]={p} outside [0, 1]")
        if not 0.0 <= self.eval_noise <= 1.0:
            raise ValueError(f"eval_noise={self.eval_noise} outside [0, 1]")


@dataclass
class PolicyDescriptor:
    name: str
    kind: str
    endpoint: str | None = None
    model_id: str | None = None
    temperature: float = 1.0
    eval_temperature: float = 0.0
    max_tokens: int = 1024
    profile: SimProfile | None = None

    def __post_init__(self) -> None:
        if self.kind not in (SCRIPTED, HTTP_CHAT):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.kind == HTTP_CHAT:
            if not self.endpoint or not self.model_id:
                raise ValueError(f"http-chat backend {self.name!r} needs endpoint and model_id")
            if self.profile is not None:
                raise ValueError("profile is only valid for scripted backends")
        else:
            if self.endpoint or self.model_id:
                raise ValueError("endpoint/model_id are only valid for http backends")
            if self.profile is None:
                raise ValueError(f"scripted backend {self.name!r} needs a profile")


@dataclass
class GenerationResult:
    steps: list[Step]
    raw_text: str
    truncated: bool = False


def encode_taskspec(spec: dict) -> str:
    """Render the machine-readable task block embedded in question text."""
    return "TASKSPEC " + json.dumps(spec, ensure_ascii=False, separators=(",", ":"))


def decode_taskspec(question_text: str) -> dict | None:
    m = TASKSPEC_RE.search(question_text)
    return json.loads(m.group(1)) if m else None


def _check_prefix_open(prefix: list[str]) -> None:
    if prefix and ANSWER_MARKER.search(prefix[-1]):
        raise BackendError("prefix already terminal")


def _render_prefix(prefix: list[str]) -> str:
    if not prefix:
        return "(none)"
    return render_steps([(s, False) for s in prefix])


class PolicyBackend:
    """One ensemble member: generates continuations and scores steps."""

    descriptor: PolicyDescriptor

    def generate_continuation(
        self, question: "QuestionRecord", prefix: list[str]
    ) -> GenerationResult:
        raise NotImplementedError

    def evaluate_node(
        self, question: "QuestionRecord", prefix: list[str], candidate: str
    ) -> float:
        raise NotImplementedError

    @property
    def name(self) -> str:
        return self.descriptor.name


class ScriptedBackend(PolicyBackend):
    """Deterministic simulator scripted by a TASKSPEC block in the question.

    Per-request randomness derives from (run seed, profile seed, question id,
    prefix hash, attempt index), so concurrent use cannot perturb results;
    the attempt index makes repeated expansion of the same node re-sample.
    """

    def __init__(self, descriptor: PolicyDescriptor, run_seed: int = 0) -> None:
        assert descriptor.kind == SCRIPTED
        self.descriptor = descriptor
        self.profile = descriptor.profile
        self._run_seed = run_seed
        self._attempts: dict[str, int] = {}
        self._lock = threading.Lock()

    def _rng(self, *parts: object) -> random.Random:
        key = "|".join(str(p) for p in parts)
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    @staticmethod
    def _hash_texts(texts: list[str]) -> str:
        return hashlib.sha256("\x1f".join(texts).encode("utf-8")).hexdigest()[:16]

    def _task(self, question: "QuestionRecord") -> dict:
        spec = decode_taskspec(question.text)
        if spec is None:
            raise BackendError(f"question {question.id!r} carries no TASKSPEC block")
        return spec

    def _distractor_run(self, task: dict, depth: int, rng: random.Random) -> list[Step]:
        steps: list[Step] = []
        d = depth
        for _ in range(rng.randint(0, 2) + 1):
            pool = (
                task["distractors"][d]
                if d < len(task["distractors"])
                else [f"Drift further off course at step {d + 1} of {task['id']}."]
            )
            steps.append((rng.choice(pool), False))
            d += 1
        wrong = rng.choice(task["wrong"])
        steps.append((f"The answer is {wrong}.", True))
        return steps

    def generate_continuation(
        self, question: "QuestionRecord", prefix: list[str]
    ) -> GenerationResult:
        task = self._task(question)
        _check_prefix_open(prefix)
        prefix_key = f"{question.id}|{self._hash_texts(prefix)}"
        with self._lock:
            attempt = self._attempts.get(prefix_key, 0) + 1
            self._attempts[prefix_key] = attempt
        rng = self._rng(
            self._run_seed,
            self.profile.rng_seed,
            question.id,
            "gen",
            self._hash_texts(prefix),
            attempt,
        )
        canonical: list[str] = task["steps"]
        knows = task["topic"] in self.profile.knowledge_topics
        accuracy = self.profile.step_accuracy.get(task["topic"], 1.0)
        on_track = len(prefix) < len(canonical) and prefix == canonical[: len(prefix)]
        steps: list[Step] = []
        if knows and on_track:
            depth = len(prefix)
            while depth < len(canonical):
                if rng.random() < accuracy:
                    terminal = depth == len(canonical) - 1
                    steps.append((canonical[depth], terminal))
                    depth += 1
                else:
                    steps.extend(self._distractor_run(task, depth, rng))
                    break
        else:
            steps = self._distractor_run(task, len(prefix), rng)
        return GenerationResult(steps, render_steps(steps))

    def evaluate_node(
        self, question: "QuestionRecord", prefix: list[str], candidate: str
    ) -> float:
        if not candidate or not candidate.strip():
            raise BackendError("empty candidate step")
        task = self._task(question)
        canonical: list[str] = task["steps"]
        on_track = len(prefix) < len(canonical) and prefix == canonical[: len(prefix)]
        correct = on_track and candidate == canonical[len(prefix)]
        score = 1.0 if correct else -1.0
        if self.profile.eval_noise > 0.0:
            rng = self._rng(
                self._run_seed,
                self.profile.rng_seed,
                question.id,
                "eval",
                self._hash_texts(prefix + [candidate]),
            )
            if rng.random() < self.profile.eval_noise:
                score = -score
        return score


def api_key_env_var(backend_name: str) -> str:
    return "COMCTS_API_KEY_" + re.sub(r"[^A-Za-z0-9]", "_", backend_name).upper()


class HttpChatBackend(PolicyBackend):
    """Client for an OpenAI-compatible chat-completions service.

    Retries up to max_attempts on timeouts, 429 and 5xx with exponential
    backoff. The bearer token comes from COMCTS_API_KEY_<NAME>.
    """

    def __init__(
        self,
        descriptor: PolicyDescriptor,
        run_seed: int = 0,
        prompts: PromptSet | None = None,
        session: requests.Session | None = None,
        max_attempts: int = 3,
        backoff_s: float = 1.0,
        timeout_s: float = 60.0,
    ) -> None:
        assert descriptor.kind == HTTP_CHAT
        self.descriptor = descriptor
        self.prompts = prompts or PromptSet()
        self.session = session or requests.Session()
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.api_key = os.environ.get(api_key_env_var(descriptor.name))
        del run_seed  # sampling happens server-side

    def _post(self, user_content, temperature: float) -> dict:
        url = self.descriptor.endpoint.rstrip("/") + "/chat/completions"
        payload = {
            "model": self.descriptor.model_id,
            "messages": [
                {"role": "system", "content": "You are a careful step-by-step reasoner."},
                {"role": "user", "content": user_content},
            ],
            "temperature": temperature,
            "max_tokens": self.descriptor.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        delay = self.backoff_s
        last_error = "unknown error"
        for attempt in range(self.max_attempts):
            try:
                resp = self.session.post(
                    url, json=payload, headers=headers, timeout=self.timeout_s
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = f"transport failure: {exc}"
            else:
                if resp.status_code == 200:
                    return resp.json()
                if resp.status_code not in RETRYABLE_STATUSES:
                    raise BackendError(
                        f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}"
                    )
                last_error = f"HTTP {resp.status_code}"
            if attempt + 1 < self.max_attempts:
                time.sleep(delay)
                delay *= 2
        raise BackendError(f"{self.name}: unreachable after {self.max_attempts} attempts ({last_error})")

    def _user_content(self, question: "QuestionRecord", prompt_text: str):
        if question.image:
            return [
                {"type": "text", "text": prompt_text},
                {"type": "image_url", "image_url": {"url": question.image}},
            ]
        return prompt_text

    @staticmethod
    def _reply_text(data: dict) -> tuple[str, str | None]:
        try:
            choice = data["choices"][0]
            return choice["message"]["content"], choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat-completions reply: {exc}") from exc

    def generate_continuation(
        self, question: "QuestionRecord", prefix: list[str]
    ) -> GenerationResult:
        _check_prefix_open(prefix)
        prompt_text = self.prompts.generate.format(
            question=question.text, prefix=_render_prefix(prefix)
        )
        data = self._post(self._user_content(question, prompt_text),
                          self.descriptor.temperature)
        text, finish_reason = self._reply_text(data)
        try:
            steps = parse_steps(text)
        except StepParseError as exc:
            raise BackendError(f"{self.name}: {exc}") from exc
        truncated = finish_reason == "length"
        if truncated and steps[-1][1]:
            steps[-1] = (steps[-1][0], False)
        return GenerationResult(steps, text, truncated)

    def evaluate_node(
        self, question: "QuestionRecord", prefix: list[str], candidate: str
    ) -> float:
        if not candidate or not candidate.strip():
            raise BackendError("empty candidate step")
        prompt_text = self.prompts.evaluate.format(
            question=question.text,
            prefix=_render_prefix(prefix),
            candidate=candidate,
        )
        content = self._user_content(question, prompt_text)
        # One re-prompt on an unparseable score, then give the vote up.
        for _ in range(2):
            data = self._post(content, self.descriptor.eval_temperature)
            text, _ = self._reply_text(data)
            try:
                return parse_score(text)
            except ScoreParseError:
                continue
        raise BackendError(f"{self.name}: unparseable score after one re-prompt")


def make_backend(
    descriptor: PolicyDescriptor,
    run_seed: int = 0,
    prompts: PromptSet | None = None,
    **http_kwargs,
) -> PolicyBackend:
    if descriptor.kind == SCRIPTED:
        return ScriptedBackend(descriptor, run_seed=run_seed)
    return HttpChatBackend(descriptor, run_seed=run_seed, prompts=prompts, **http_kwargs)


def make_ensemble(
    descriptors: list[PolicyDescriptor],
    run_seed: int = 0,
    prompts: PromptSet | None = None,
) -> list[PolicyBackend]:
    names = [d.name for d in descriptors]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate backend names in ensemble: {names}")
    return [make_backend(d, run_seed=run_seed, prompts=prompts) for d in descriptors]
