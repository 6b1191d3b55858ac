"""Shared domain types and the canonical tag serialization of reasoning/answer pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator

LengthFn = Callable[[str], int]


def scalar_length(text: str) -> int:
    """Default length unit: unicode scalar values of the text."""
    return len(text)


class MalformedStructure(ValueError):
    """Candidate text does not match the required think/answer tag structure."""


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"
    HUMAN_CSR = "human_csr"


class CotMode(str, Enum):
    """Placement of the reasoning chain relative to the answer.

    HYBRID_COT is a dataset-level mixture; a single serialized record is
    always PRE_COT or POST_COT.
    """

    PRE_COT = "pre_cot"
    POST_COT = "post_cot"
    HYBRID_COT = "hybrid_cot"


class Origin(str, Enum):
    SAMPLED = "sampled"
    REFINED = "refined"
    EXTERNAL = "external"


@dataclass(frozen=True)
class Turn:
    """One utterance in a service conversation."""

    role: Role
    text: str
    index: int

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("turn text must be non-empty after whitespace trim")
        if self.index < 0:
            raise ValueError("turn index must be non-negative")


@dataclass(frozen=True)
class KnowledgeSnippet:
    """One retrieved knowledge passage available to the responder."""

    id: str
    content: str


@dataclass(frozen=True)
class DialogueContext:
    """One service conversation: history, current query, retrieved knowledge.

    ``reference_length`` is derived from ``reference_response`` with the
    default length unit when not given explicitly; pass it explicitly to use
    a different unit (e.g. tokens).
    """

    dialogue_id: str
    history: tuple[Turn, ...]
    query: str
    snippets: tuple[KnowledgeSnippet, ...] = ()
    reference_response: str | None = None
    reference_length: int | None = None

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValueError("query must be non-empty")
        indices = [turn.index for turn in self.history]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("turn indices must be strictly increasing")
        snippet_ids = [snippet.id for snippet in self.snippets]
        if len(set(snippet_ids)) != len(snippet_ids):
            raise ValueError("snippet ids must be unique within a dialogue")
        if self.reference_length is None and self.reference_response is not None:
            object.__setattr__(
                self, "reference_length", scalar_length(self.reference_response)
            )
        if self.reference_length is not None and self.reference_length < 1:
            raise ValueError("reference_length must be a positive integer")

    def has_human_csr_turn(self) -> bool:
        return any(turn.role is Role.HUMAN_CSR for turn in self.history)


@dataclass(frozen=True)
class ThoughtTrace:
    """Reasoning process and response strategy distilled from a human-agent record."""

    reasoning_process: str
    response_strategy: str

    def __post_init__(self) -> None:
        if not self.reasoning_process.strip() or not self.response_strategy.strip():
            raise ValueError("both trace sections must be non-empty")


@dataclass(frozen=True)
class CandidatePair:
    """A (reasoning, answer) pair with its serialization mode."""

    cot: str
    answer: str
    mode: CotMode = CotMode.PRE_COT
    origin: Origin = Origin.SAMPLED

    def __post_init__(self) -> None:
        if not self.answer:
            raise ValueError("candidate answer must be non-empty")


@dataclass(frozen=True)
class RewardWeights:
    """Weighting coefficients of the composite reward.

    alpha* weight the rule rewards (format, length, rule-match), beta* the
    judge rewards (human-likeness, risk, comparison), gamma the hallucination
    penalty. rho is the cache ratio of the soft length penalty window.
    """

    alpha1: float = 0.2
    alpha2: float = 0.5
    alpha3: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    gamma: float = 5.0
    rho: float = 0.2

    def __post_init__(self) -> None:
        for name in ("alpha1", "alpha2", "alpha3", "beta1", "beta2", "beta3", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


_THINK_OPEN = "<think>"
_THINK_CLOSE = "</think>"
_ANSWER_OPEN = "<answer>"
_ANSWER_CLOSE = "</answer>"
_ALL_TAGS = (_THINK_OPEN, _THINK_CLOSE, _ANSWER_OPEN, _ANSWER_CLOSE)


def serialize_candidate(pair: CandidatePair, mode: CotMode) -> str:
    """Render a pair into its canonical tagged string for the given mode."""
    if mode is CotMode.PRE_COT:
        return f"{_THINK_OPEN}{pair.cot}{_THINK_CLOSE}{_ANSWER_OPEN}{pair.answer}{_ANSWER_CLOSE}"
    if mode is CotMode.POST_COT:
        return f"{_ANSWER_OPEN}{pair.answer}{_ANSWER_CLOSE}{_THINK_OPEN}{pair.cot}{_THINK_CLOSE}"
    raise ValueError("a single record is serialized as PRE_COT or POST_COT only")


def parse_candidate(text: str, mode: CotMode) -> CandidatePair:
    """Inverse of serialize_candidate.

    Requires exactly one think segment and one answer segment in the order the
    mode demands; surrounding whitespace and whitespace between the two
    segments are tolerated. Raises MalformedStructure for missing, duplicated,
    nested, or out-of-order tags, and for an empty answer segment (no valid
    pair exists for those inputs).
    """
    if mode not in (CotMode.PRE_COT, CotMode.POST_COT):
        raise ValueError("parse mode must be PRE_COT or POST_COT")
    stripped = text.strip()
    positions: dict[str, int] = {}
    for tag in _ALL_TAGS:
        first = stripped.find(tag)
        if first == -1:
            raise MalformedStructure(f"missing {tag} tag")
        if stripped.find(tag, first + 1) != -1:
            raise MalformedStructure(f"duplicated {tag} tag")
        positions[tag] = first

    think_open, think_close = positions[_THINK_OPEN], positions[_THINK_CLOSE]
    answer_open, answer_close = positions[_ANSWER_OPEN], positions[_ANSWER_CLOSE]
    if mode is CotMode.PRE_COT:
        ordering = (think_open, think_close, answer_open, answer_close)
        first_open, inner_close, inner_open = think_open, think_close, answer_open
        last_close_end = answer_close + len(_ANSWER_CLOSE)
    else:
        ordering = (answer_open, answer_close, think_open, think_close)
        first_open, inner_close, inner_open = answer_open, answer_close, think_open
        last_close_end = think_close + len(_THINK_CLOSE)
    if list(ordering) != sorted(ordering):
        raise MalformedStructure("tags out of order for the requested mode")
    if first_open != 0 or last_close_end != len(stripped):
        raise MalformedStructure("text outside the tagged segments")
    gap = stripped[inner_close + len(_THINK_CLOSE if mode is CotMode.PRE_COT else _ANSWER_CLOSE) : inner_open]
    if gap.strip():
        raise MalformedStructure("unexpected text between segments")

    cot = stripped[think_open + len(_THINK_OPEN) : think_close]
    answer = stripped[answer_open + len(_ANSWER_OPEN) : answer_close]
    if not answer:
        raise MalformedStructure("empty answer segment")
    return CandidatePair(cot=cot, answer=answer, mode=mode, origin=Origin.EXTERNAL)


def dialogue_to_payload(dialogue: DialogueContext) -> dict:
    """Serialize a dialogue to its corpus JSON object."""
    payload: dict = {
        "dialogue_id": dialogue.dialogue_id,
        "history": [{"role": turn.role.value, "text": turn.text} for turn in dialogue.history],
        "query": dialogue.query,
        "snippets": [{"id": s.id, "content": s.content} for s in dialogue.snippets],
        "reference_response": dialogue.reference_response,
    }
    return payload


def dialogue_from_payload(payload: dict, length_fn: LengthFn = scalar_length) -> DialogueContext:
    """Build a dialogue from its corpus JSON object."""
    history = tuple(
        Turn(role=Role(item["role"]), text=item["text"], index=i)
        for i, item in enumerate(payload.get("history", []))
    )
    snippets = tuple(
        KnowledgeSnippet(id=item["id"], content=item["content"])
        for item in payload.get("snippets", [])
    )
    reference = payload.get("reference_response")
    return DialogueContext(
        dialogue_id=payload["dialogue_id"],
        history=history,
        query=payload["query"],
        snippets=snippets,
        reference_response=reference,
        reference_length=length_fn(reference) if reference is not None else None,
    )


def load_dialogues(path: str | Path, length_fn: LengthFn = scalar_length) -> Iterator[DialogueContext]:
    """Stream dialogues from a JSON Lines corpus file."""
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield dialogue_from_payload(json.loads(line), length_fn=length_fn)


def dump_dialogues(dialogues: Iterable[DialogueContext], path: str | Path) -> int:
    """Write dialogues to a JSON Lines corpus file; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for dialogue in dialogues:
            handle.write(json.dumps(dialogue_to_payload(dialogue), ensure_ascii=False) + "\n")
            count += 1
    return count
