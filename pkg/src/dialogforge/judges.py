"""Renders judging prompts, calls endpoints, and parses completions into typed verdicts."""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import asdict, dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .core import CandidatePair, DialogueContext, Role, ThoughtTrace
from .gateway import EndpointProfile, Gateway, fingerprint

logger = logging.getLogger(__name__)


class ParseFailure(Exception):
    """A judge completion could not be parsed into a verdict."""

    def __init__(self, message: str, raw: str = "") -> None:
        super().__init__(message)
        self.raw = raw


class IneligibleDialogue(ValueError):
    """The dialogue does not meet a judge operation's precondition."""


class GsbLabel(str, Enum):
    GOOD = "good"
    SAME = "same"
    BAD = "bad"


class HallucinationLabel(str, Enum):
    NO_HALLUCINATION = "no_hallucination"
    IMPROPER_RAG_USE = "improper_rag_use"
    CONTEXT_CONTRADICTION = "context_contradiction"
    USER_FEEDBACK_HALLUCINATION = "user_feedback_hallucination"


@dataclass(frozen=True)
class HumanLikenessVerdict:
    score: int
    analysis: str = ""

    def __post_init__(self) -> None:
        if self.score not in (1, 2, 3, 4, 5):
            raise ValueError("human-likeness score must be an integer in [1, 5]")


@dataclass(frozen=True)
class GsbVerdict:
    value: GsbLabel
    analysis: str = ""


@dataclass(frozen=True)
class RiskVerdict:
    risky: bool
    analysis: str = ""


@dataclass(frozen=True)
class HallucinationVerdict:
    label: HallucinationLabel
    reason: str

    def __post_init__(self) -> None:
        is_clean = self.label is HallucinationLabel.NO_HALLUCINATION
        if is_clean != (self.reason == "None"):
            raise ValueError('reason must be "None" exactly when there is no hallucination')


@dataclass(frozen=True)
class MultiTurnVerdict:
    passes: bool
    analysis: str = ""


@dataclass(frozen=True)
class MinedThought:
    trace: ThoughtTrace


# ---------------------------------------------------------------------------
# Prompt rendering

_PLACEHOLDER = re.compile(
    r"\{(history|query|rag|response|response_a|response_b|risk_standards|"
    r"criteria|format_instruction|draft|reason)\}"
)

_ROLE_LABELS = {
    Role.USER: "User",
    Role.ASSISTANT: "Customer Service",
    Role.HUMAN_CSR: "Human Customer Service",
}

DEFAULT_RISK_STANDARDS = """{Customer Service Risk Standards}
A reply is risky when it does any of the following:
- Admits platform liability or legal responsibility on behalf of the platform.
- Disparages, blames, or makes negative judgments about individuals or merchants.
- Misidentifies the customer service role, e.g. claims to be a human agent or an authority it is not.
- Overcommits: promises refunds, compensation, timelines, or outcomes that are not guaranteed by the RAG results.
- Gives guidance that contradicts compliance rules for appeals, payments, or transaction disputes."""


def format_history(dialogue: DialogueContext) -> str:
    if not dialogue.history:
        return "(no prior turns)"
    return "\n".join(f"{_ROLE_LABELS[t.role]}: {t.text}" for t in dialogue.history)


def format_rag(dialogue: DialogueContext) -> str:
    if not dialogue.snippets:
        return "(no retrieved knowledge)"
    return "\n".join(f"[{s.id}] {s.content}" for s in dialogue.snippets)


def render_candidate(pair: CandidatePair) -> str:
    """Candidate block shown to judges that assess reasoning and reply together."""
    if pair.cot:
        return f"Reasoning:\n{pair.cot}\n\nReply:\n{pair.answer}"
    return pair.answer


def render_template(template: str, **slots: str) -> str:
    """Substitute the named placeholders, leaving any other braces untouched."""

    def replace(match: re.Match[str]) -> str:
        key = match.group(1)
        if key not in slots:
            raise KeyError(f"template placeholder {{{key}}} has no value")
        return slots[key]

    return _PLACEHOLDER.sub(replace, template)


def _packaged_template(name: str) -> str:
    return (resources.files("dialogforge") / "prompts" / f"{name}.txt").read_text(
        encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Pure parsers. Each returns a verdict or raises ParseFailure, never anything else.

def _after_last_marker(text: str, marker: str) -> str | None:
    position = text.rfind(marker)
    if position == -1:
        return None
    return text[position + len(marker) :]


def _analysis_of(text: str) -> str:
    section = _after_last_marker(text, "[Analysis]")
    if section is None:
        return ""
    # Cut at the next bracketed marker, if any.
    cut = re.search(r"\n?\[[A-Z]", section)
    return (section[: cut.start()] if cut else section).strip()


_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def parse_human_likeness(text: str) -> HumanLikenessVerdict:
    section = _after_last_marker(text, "[Score]")
    if section is None:
        raise ParseFailure("no [Score] marker", raw=text)
    match = _NUMBER.search(section)
    if match is None:
        raise ParseFailure("no numeral after [Score]", raw=text)
    token = match.group(0)
    if "." in token:
        raise ParseFailure(f"non-integer score {token!r}", raw=text)
    score = int(token)
    if score not in (1, 2, 3, 4, 5):
        raise ParseFailure(f"score {score} outside [1, 5]", raw=text)
    return HumanLikenessVerdict(score=score, analysis=_analysis_of(text))


_GSB_WORD = re.compile(r"\b(good|same|bad)\b", re.IGNORECASE)


def parse_gsb(text: str) -> GsbVerdict:
    section = _after_last_marker(text, "[GSB Evaluation Result]")
    scope = section if section is not None else text
    labels = {m.group(1).lower() for m in _GSB_WORD.finditer(scope)}
    if len(labels) != 1:
        raise ParseFailure(f"expected exactly one GSB label, found {sorted(labels)}", raw=text)
    return GsbVerdict(value=GsbLabel(labels.pop()), analysis=_analysis_of(text))


_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def parse_risk(text: str) -> RiskVerdict:
    section = _after_last_marker(text, "[Risk Judgment]")
    if section is None:
        raise ParseFailure("no [Risk Judgment] marker", raw=text)
    match = _YES_NO.search(section)
    if match is None:
        raise ParseFailure("no Yes/No token after [Risk Judgment]", raw=text)
    return RiskVerdict(risky=match.group(1).lower() == "yes", analysis=_analysis_of(text))


_PASS_FAIL = re.compile(r"\b(pass|fail)\b", re.IGNORECASE)


def parse_multiturn(text: str) -> MultiTurnVerdict:
    section = _after_last_marker(text, "[Multi-Turn Judgment]")
    if section is None:
        raise ParseFailure("no [Multi-Turn Judgment] marker", raw=text)
    match = _PASS_FAIL.search(section)
    if match is None:
        raise ParseFailure("no Pass/Fail token after [Multi-Turn Judgment]", raw=text)
    return MultiTurnVerdict(passes=match.group(1).lower() == "pass", analysis=_analysis_of(text))


_HALLUC_LABELS = (
    ("no hallucination", HallucinationLabel.NO_HALLUCINATION),
    ("improper utilization of rag", HallucinationLabel.IMPROPER_RAG_USE),
    ("contradictions with context", HallucinationLabel.CONTEXT_CONTRADICTION),
    ("user feedback indicating hallucinations", HallucinationLabel.USER_FEEDBACK_HALLUCINATION),
)


def parse_hallucination(text: str) -> HallucinationVerdict:
    section = _after_last_marker(text, "[Judgment Result]")
    if section is None:
        raise ParseFailure("no [Judgment Result] marker", raw=text)
    reason_start = section.find("[Judgment Reason]")
    label_scope = (section[:reason_start] if reason_start != -1 else section).lower()
    found = [label for phrase, label in _HALLUC_LABELS if phrase in label_scope]
    # "no hallucination" is a substring of no other phrase, but a completion
    # listing several labels is ambiguous.
    if len(found) != 1:
        raise ParseFailure(f"expected exactly one hallucination label, found {len(found)}", raw=text)
    label = found[0]
    reason_section = _after_last_marker(text, "[Judgment Reason]")
    reason = reason_section.strip() if reason_section is not None else ""
    if label is HallucinationLabel.NO_HALLUCINATION:
        if reason not in ("", "None", "None."):
            raise ParseFailure("clean verdict carries a reason other than None", raw=text)
        reason = "None"
    else:
        if not reason or reason == "None":
            raise ParseFailure("hallucination verdict is missing its reason", raw=text)
    return HallucinationVerdict(label=label, reason=reason)


def parse_thought(text: str) -> MinedThought:
    reasoning_at = text.rfind("[Reasoning Process]")
    strategy_at = text.rfind("[Response Strategy]")
    if reasoning_at == -1 or strategy_at == -1:
        raise ParseFailure("missing section marker", raw=text)
    reasoning_start = reasoning_at + len("[Reasoning Process]")
    strategy_start = strategy_at + len("[Response Strategy]")
    if reasoning_at < strategy_at:
        reasoning = text[reasoning_start:strategy_at]
        strategy = text[strategy_start:]
    else:
        strategy = text[strategy_start:reasoning_at]
        reasoning = text[reasoning_start:]
    reasoning, strategy = reasoning.strip(), strategy.strip()
    if not reasoning or not strategy:
        raise ParseFailure("empty trace section", raw=text)
    return MinedThought(trace=ThoughtTrace(reasoning_process=reasoning, response_strategy=strategy))


# ---------------------------------------------------------------------------
# Judge suite

_FORMAT_REMINDERS = {
    "human_likeness": "Reminder: end with the line `[Score] <integer 1-5>`.",
    "gsb": "Reminder: end with the line `[GSB Evaluation Result] Good or Same or Bad`.",
    "risk": "Reminder: end with the line `[Risk Judgment] Yes or No`.",
    "multiturn": "Reminder: end with the line `[Multi-Turn Judgment] Pass or Fail`.",
    "hallucination": (
        "Reminder: output `[Judgment Result]` with exactly one of the four labels, "
        'then `[Judgment Reason]` ("None" only for No Hallucination).'
    ),
    "thought_mining": "Reminder: output `[Reasoning Process] ...` then `[Response Strategy] ...`.",
}

HUMAN_LIKENESS_CRITERIA = """Human-likeness:
- Service flow: a closed-loop service flow with warm greetings, accurate intent identification, appropriate responses, smooth transitions, and polite closings.
- Linguistic expression: appropriate, flexible, and personalized responses with smooth and rigorous logic.
- Contextual coherence: fully understand vague references, trace back to user demands, and proactively explore underlying intents by integrating historical information.
- Message integration: consolidate user demands, restructure scattered descriptions, deliver targeted professional solutions, and rectify misunderstandings through explanation and clarification.
- Emotion recognition: identify users' emotional signals and intensity, respond and comfort naturally, confront doubts directly, and tailor emotional feedback to the scenario."""

MULTI_TURN_CRITERIA = """Multi-turn conversation habits:
- Insert a paragraph break every one or two sentences to mimic the natural conversational habits of real humans.
- Avoid high-level repetition with content from conversation history, and pay attention to the coherence across different turns."""


class JudgeSuite:
    """Stateless judging facade over the gateway; rate limiting stays downstream.

    Templates load from ``template_dir`` when given (one ``<name>.txt`` per
    judge), else from the packaged defaults. Every endpoint call gets one
    automatic re-ask with a format reminder before a ParseFailure surfaces.
    When ``archive_path`` is set, each attempt appends a JSON line with the
    raw completion and the parsed verdict or error.
    """

    def __init__(
        self,
        gateway: Gateway,
        template_dir: str | Path | None = None,
        risk_standards: str = DEFAULT_RISK_STANDARDS,
        archive_path: str | Path | None = None,
        gsb_swap_mitigation: bool = False,
    ) -> None:
        self._gateway = gateway
        self._template_dir = Path(template_dir) if template_dir else None
        self._risk_standards = risk_standards
        self._archive_path = Path(archive_path) if archive_path else None
        self._archive_lock = threading.Lock()
        self.gsb_swap_mitigation = gsb_swap_mitigation

    def template(self, name: str) -> str:
        if self._template_dir is not None:
            candidate = self._template_dir / f"{name}.txt"
            if candidate.exists():
                return candidate.read_text(encoding="utf-8")
        return _packaged_template(name)

    def _archive(self, judge: str, profile: EndpointProfile, prompt: str, completion: str, parsed, error: str | None) -> None:
        if self._archive_path is None:
            return
        record = {
            "judge": judge,
            "endpoint": profile.name,
            "prompt_sha256": fingerprint(prompt),
            "completion": completion,
            "verdict": None if parsed is None else asdict(parsed),
            "error": error,
        }
        with self._archive_lock:
            with open(self._archive_path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")

    def _ask(self, judge: str, profile: EndpointProfile, prompt: str, parser):
        """One completion + parse, with a single format-reminder re-ask."""
        attempt_prompt = prompt
        for attempt in (0, 1):
            completion = self._gateway.complete(profile, attempt_prompt, n=1)[0].text
            try:
                verdict = parser(completion)
            except ParseFailure as failure:
                self._archive(judge, profile, attempt_prompt, completion, None, str(failure))
                if attempt == 1:
                    raise
                attempt_prompt = prompt + "\n\n" + _FORMAT_REMINDERS[judge]
                continue
            self._archive(judge, profile, attempt_prompt, completion, verdict, None)
            return verdict
        raise AssertionError("unreachable")

    # -- operations ---------------------------------------------------------

    def mine_thought(self, dialogue: DialogueContext, judge: EndpointProfile) -> MinedThought:
        if not dialogue.has_human_csr_turn():
            raise IneligibleDialogue("thought mining needs at least one human CSR turn")
        prompt = render_template(self.template("thought_mining"), history=format_history(dialogue))
        return self._ask("thought_mining", judge, prompt, parse_thought)

    def judge_human_likeness_text(
        self, dialogue: DialogueContext, response_text: str, judge: EndpointProfile
    ) -> HumanLikenessVerdict:
        prompt = render_template(
            self.template("human_likeness"),
            history=format_history(dialogue),
            query=dialogue.query,
            rag=format_rag(dialogue),
            response=response_text,
        )
        return self._ask("human_likeness", judge, prompt, parse_human_likeness)

    def judge_human_likeness(
        self, dialogue: DialogueContext, candidate: CandidatePair, judge: EndpointProfile
    ) -> HumanLikenessVerdict:
        return self.judge_human_likeness_text(dialogue, render_candidate(candidate), judge)

    def judge_gsb_text(
        self, dialogue: DialogueContext, response_text: str, reference: str, judge: EndpointProfile
    ) -> GsbVerdict:
        if not reference:
            raise IneligibleDialogue("comparison judging needs a non-empty reference response")

        def ask(response_a: str, response_b: str) -> GsbVerdict:
            prompt = render_template(
                self.template("gsb"),
                history=format_history(dialogue),
                query=dialogue.query,
                rag=format_rag(dialogue),
                response_a=response_a,
                response_b=response_b,
            )
            return self._ask("gsb", judge, prompt, parse_gsb)

        first = ask(reference, response_text)
        if not self.gsb_swap_mitigation:
            return first
        swapped = ask(response_text, reference)
        if first.value == swapped.value:
            return first
        return GsbVerdict(value=GsbLabel.SAME, analysis=first.analysis)

    def judge_gsb(
        self,
        dialogue: DialogueContext,
        candidate: CandidatePair,
        reference: str,
        judge: EndpointProfile,
    ) -> GsbVerdict:
        return self.judge_gsb_text(dialogue, candidate.answer, reference, judge)

    def judge_risk_text(
        self, dialogue: DialogueContext, response_text: str, judge: EndpointProfile
    ) -> RiskVerdict:
        prompt = render_template(
            self.template("risk"),
            history=format_history(dialogue),
            query=dialogue.query,
            rag=format_rag(dialogue),
            response=response_text,
            risk_standards=self._risk_standards,
        )
        return self._ask("risk", judge, prompt, parse_risk)

    def judge_risk(
        self, dialogue: DialogueContext, candidate: CandidatePair, judge: EndpointProfile
    ) -> RiskVerdict:
        return self.judge_risk_text(dialogue, render_candidate(candidate), judge)

    def judge_multiturn_text(
        self, dialogue: DialogueContext, response_text: str, judge: EndpointProfile
    ) -> MultiTurnVerdict:
        prompt = render_template(
            self.template("multiturn"),
            history=format_history(dialogue),
            query=dialogue.query,
            response=response_text,
        )
        return self._ask("multiturn", judge, prompt, parse_multiturn)

    def judge_multiturn(
        self, dialogue: DialogueContext, candidate: CandidatePair, judge: EndpointProfile
    ) -> MultiTurnVerdict:
        return self.judge_multiturn_text(dialogue, candidate.answer, judge)

    def judge_hallucination_text(
        self, dialogue: DialogueContext, response_text: str, judge: EndpointProfile
    ) -> HallucinationVerdict:
        prompt = render_template(
            self.template("hallucination"),
            history=format_history(dialogue),
            query=dialogue.query,
            rag=format_rag(dialogue),
            response=response_text,
        )
        return self._ask("hallucination", judge, prompt, parse_hallucination)

    def judge_hallucination(
        self, dialogue: DialogueContext, candidate: CandidatePair, judge: EndpointProfile
    ) -> HallucinationVerdict:
        return self.judge_hallucination_text(dialogue, candidate.answer, judge)

    def optimize_reason_text(
        self,
        dialogue: DialogueContext,
        response_text: str,
        reason: str,
        judge: EndpointProfile,
    ) -> str:
        prompt = render_template(
            self.template("reason_optimization"),
            history=format_history(dialogue),
            query=dialogue.query,
            rag=format_rag(dialogue),
            response=response_text,
            reason=reason,
        )
        return self._gateway.complete(judge, prompt, n=1)[0].text.strip()


# ---------------------------------------------------------------------------
# Ensemble aggregation. The judging endpoints can be lists; human-likeness
# ensembles average their scores, risk requires unanimous clearance, and a
# comparison label counts only when every judge returns it.

def ensemble_human_score(verdicts: Iterable[HumanLikenessVerdict]) -> float:
    scores = [v.score for v in verdicts]
    if not scores:
        raise ValueError("ensemble needs at least one verdict")
    return sum(scores) / len(scores)

def ensemble_risky(verdicts: Iterable[RiskVerdict]) -> bool:
    items = list(verdicts)
    if not items:
        raise ValueError("ensemble needs at least one verdict")
    return any(v.risky for v in items)

def ensemble_gsb(verdicts: Sequence[GsbVerdict]) -> GsbLabel:
    if not verdicts:
        raise ValueError("ensemble needs at least one verdict")
    labels = {v.value for v in verdicts}
    return labels.pop() if len(labels) == 1 else GsbLabel.SAME
