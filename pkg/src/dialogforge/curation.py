"""Mining, rejection sampling, refine, and corpus emission stages."""

from __future__ import annotations

import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence, TypeVar

from .core import (
    CandidatePair,
    CotMode,
    DialogueContext,
    MalformedStructure,
    Origin,
    RewardWeights,
    ThoughtTrace,
    parse_candidate,
    serialize_candidate,
)
from .gateway import EndpointProfile, Gateway, GatewayError
from .judges import (
    GsbLabel,
    GsbVerdict,
    HumanLikenessVerdict,
    HUMAN_LIKENESS_CRITERIA,
    IneligibleDialogue,
    JudgeSuite,
    MULTI_TURN_CRITERIA,
    ParseFailure,
    RiskVerdict,
    ensemble_gsb,
    ensemble_human_score,
    ensemble_risky,
    format_history,
    format_rag,
    render_candidate,
    render_template,
)
from .rewards import (
    RewardVector,
    RolloutGroup,
    RuleSet,
    compute_format_reward,
    compute_group_advantages,
    compute_length_reward,
    compute_match_reward,
)

logger = logging.getLogger(__name__)

_T = TypeVar("_T")
_R = TypeVar("_R")


class GenerationFailure(Exception):
    """Every sampling call for a dialogue failed."""


class Stage(str, Enum):
    THINK = "think"
    BASIC_REJECT = "basic_reject"
    BASIC_REFINE = "basic_refine"
    HARD_REJECT = "hard_reject"
    HARD_REFINE = "hard_refine"

    @property
    def is_hard(self) -> bool:
        return self in (Stage.HARD_REJECT, Stage.HARD_REFINE)


class RefineCriterion(str, Enum):
    HUMAN_LIKENESS = "human_likeness"
    MULTI_TURN = "multi_turn"


_CRITERIA_TEXT = {
    RefineCriterion.HUMAN_LIKENESS: HUMAN_LIKENESS_CRITERIA,
    RefineCriterion.MULTI_TURN: MULTI_TURN_CRITERIA,
}

_STAGE_CRITERIA = {
    Stage.BASIC_REFINE: frozenset({RefineCriterion.HUMAN_LIKENESS}),
    Stage.HARD_REFINE: frozenset({RefineCriterion.HUMAN_LIKENESS, RefineCriterion.MULTI_TURN}),
}


@dataclass(frozen=True)
class StageConfig:
    """One stage's endpoints, sampling budget, and serialization mode."""

    stage: Stage
    generator_profiles: tuple[EndpointProfile, ...]
    judge_profiles: Mapping[str, tuple[EndpointProfile, ...]]
    n_candidates: int = 8
    cot_mode: CotMode = CotMode.PRE_COT
    refine_criteria: frozenset[RefineCriterion] = frozenset()
    hybrid_ratio: float = 0.5
    halluc_sample_rate: float = 1.0

    def __post_init__(self) -> None:
        if self.stage is not Stage.THINK and not self.generator_profiles:
            raise ValueError("at least one generator profile is required")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if not 0.0 <= self.hybrid_ratio <= 1.0:
            raise ValueError("hybrid_ratio must lie in [0, 1]")
        expected = _STAGE_CRITERIA.get(self.stage)
        if expected is not None:
            if not self.refine_criteria:
                object.__setattr__(self, "refine_criteria", expected)
            elif frozenset(self.refine_criteria) != expected:
                raise ValueError(
                    f"{self.stage.value} must use criteria {sorted(c.value for c in expected)}"
                )

    def judges_for(self, name: str) -> tuple[EndpointProfile, ...]:
        profiles = tuple(self.judge_profiles.get(name, ()))
        if not profiles:
            raise ValueError(f"no judge endpoints configured for {name!r}")
        return profiles


class Disposition(str, Enum):
    SELECTED = "selected"
    ALL_FILTERED = "all_filtered"


@dataclass(frozen=True)
class CandidateJudgments:
    """Verdicts for one sampled candidate; None entries mean it never got that far."""

    human: HumanLikenessVerdict | None = None
    gsb: GsbVerdict | None = None
    risk: RiskVerdict | None = None
    human_score: float | None = None
    error: str | None = None


@dataclass(frozen=True)
class SelectionOutcome:
    selected: CandidatePair | None
    verdicts: tuple[CandidateJudgments, ...]
    disposition: Disposition
    selected_index: int | None = None

    def __post_init__(self) -> None:
        if (self.selected is not None) != (self.disposition is Disposition.SELECTED):
            raise ValueError("selected must be present exactly when disposition is SELECTED")


@dataclass(frozen=True)
class RefineOutcome:
    pair: CandidatePair
    improved: bool
    original_score: float
    refined_score: float | None = None


@dataclass
class StageCounters:
    """Per-stage event counts surfaced in the run manifest."""

    values: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str, amount: int = 1) -> None:
        with self._lock:
            self.values[name] = self.values.get(name, 0) + amount


_FORMAT_INSTRUCTIONS = {
    CotMode.PRE_COT: (
        "# Output Format\n"
        "First write your reasoning inside <think></think>, then the reply inside "
        "<answer></answer>, with nothing outside the tags:\n"
        "<think>...</think><answer>...</answer>"
    ),
    CotMode.POST_COT: (
        "# Output Format\n"
        "First write the reply inside <answer></answer>, then your reasoning inside "
        "<think></think>, with nothing outside the tags:\n"
        "<answer>...</answer><think>...</think>"
    ),
}


class CurationPipeline:
    """Drives the data-curation stages against a gateway and judge suite.

    All randomness flows from the seeded generator handed in, so a re-run with
    the same seed and stub backend is byte-identical.
    """

    def __init__(
        self,
        gateway: Gateway,
        judges: JudgeSuite,
        rng: random.Random,
        ruleset: RuleSet | None = None,
        length_fn=None,
        workers: int = 1,
    ) -> None:
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self._gateway = gateway
        self._judges = judges
        self._rng = rng
        self._ruleset = ruleset or RuleSet()
        self._length_fn = length_fn or (lambda text: len(text))
        self._workers = workers
        self.counters = StageCounters()

    def _fan_out(self, work: Callable[[_T], _R], items: Sequence[_T]) -> Iterator[_R]:
        """Apply work to every item, preserving input order in the results.

        Randomness must be drawn before dispatch; worker tasks only do I/O.
        """
        if self._workers == 1 or len(items) <= 1:
            return iter([work(item) for item in items])
        with ThreadPoolExecutor(max_workers=self._workers) as pool:
            return iter(list(pool.map(work, items)))

    # -- mode and prompt helpers ---------------------------------------------

    def _resolve_mode(self, mode: CotMode, hybrid_ratio: float) -> CotMode:
        if mode is not CotMode.HYBRID_COT:
            return mode
        return CotMode.PRE_COT if self._rng.random() < hybrid_ratio else CotMode.POST_COT

    def build_generation_prompt(self, dialogue: DialogueContext, mode: CotMode) -> str:
        return render_template(
            self._judges.template("generation"),
            history=format_history(dialogue),
            query=dialogue.query,
            rag=format_rag(dialogue),
            format_instruction=_FORMAT_INSTRUCTIONS[mode],
        )

    def _build_refine_prompt(
        self, dialogue: DialogueContext, pair: CandidatePair, criteria: frozenset[RefineCriterion]
    ) -> str:
        criteria_text = "\n\n".join(
            _CRITERIA_TEXT[c] for c in sorted(criteria, key=lambda c: c.value)
        )
        return render_template(
            self._judges.template("refine"),
            history=format_history(dialogue),
            query=dialogue.query,
            rag=format_rag(dialogue),
            criteria=criteria_text,
            format_instruction=_FORMAT_INSTRUCTIONS[pair.mode],
            draft=serialize_candidate(pair, pair.mode),
        )

    # -- think stage ----------------------------------------------------------

    def run_think_stage(
        self, corpus: Iterable[DialogueContext], cfg: StageConfig
    ) -> Iterator[tuple[DialogueContext, ThoughtTrace]]:
        """Mine one thought trace per eligible dialogue, skipping failures."""
        miners = cfg.judges_for("mining")
        eligible: list[DialogueContext] = []
        for dialogue in corpus:
            self.counters.bump("dialogues_in")
            if not dialogue.has_human_csr_turn():
                self.counters.bump("skipped_no_csr")
                logger.info("dialogue %s skipped: no human CSR turn", dialogue.dialogue_id)
                continue
            eligible.append(dialogue)

        def mine(dialogue: DialogueContext) -> ThoughtTrace | None:
            try:
                return self._judges.mine_thought(dialogue, miners[0]).trace
            except ParseFailure:
                self.counters.bump("skipped_parse_failure")
                logger.info("dialogue %s skipped: mining output unparseable", dialogue.dialogue_id)
                return None
            except GatewayError as exc:
                self.counters.bump("gateway_failures")
                logger.warning("dialogue %s skipped: %s", dialogue.dialogue_id, exc)
                return None

        for dialogue, trace in zip(eligible, self._fan_out(mine, eligible)):
            if trace is None:
                continue
            self.counters.bump("traces_out")
            yield dialogue, trace

    # -- rejection sampling ----------------------------------------------------

    def _sample_candidates(
        self,
        dialogue: DialogueContext,
        cfg: StageConfig,
        mode: CotMode,
        n: int,
        temperature_bump: float = 0.0,
    ) -> list[tuple[str, str]]:
        """Sample n completions round-robin across the generators.

        Returns (completion text, generator name) in candidate-index order.
        """
        prompt = self.build_generation_prompt(dialogue, mode)
        profiles = cfg.generator_profiles
        slots: list[tuple[str, str] | None] = [None] * n
        failures = 0
        for p_index, profile in enumerate(profiles):
            indices = list(range(p_index, n, len(profiles)))
            if not indices:
                continue
            if temperature_bump:
                profile = replace(
                    profile, temperature=min(2.0, profile.temperature + temperature_bump)
                )
            try:
                completions = self._gateway.complete(profile, prompt, n=len(indices))
            except GatewayError as exc:
                failures += 1
                logger.warning("generator %s failed for %s: %s", profile.name, dialogue.dialogue_id, exc)
                continue
            for slot, completion in zip(indices, completions):
                slots[slot] = (completion.text, profile.name)
        filled = [s for s in slots if s is not None]
        if not filled:
            raise GenerationFailure(f"all {failures} generator calls failed for {dialogue.dialogue_id}")
        return filled

    def _judge_candidate(
        self, dialogue: DialogueContext, pair: CandidatePair, cfg: StageConfig
    ) -> CandidateJudgments:
        assert dialogue.reference_response is not None
        human_verdicts = [
            self._judges.judge_human_likeness(dialogue, pair, judge)
            for judge in cfg.judges_for("human")
        ]
        gsb_verdicts = [
            self._judges.judge_gsb(dialogue, pair, dialogue.reference_response, judge)
            for judge in cfg.judges_for("gsb")
        ]
        risk_verdicts = [
            self._judges.judge_risk(dialogue, pair, judge) for judge in cfg.judges_for("risk")
        ]
        return CandidateJudgments(
            human=human_verdicts[0],
            gsb=GsbVerdict(value=ensemble_gsb(gsb_verdicts), analysis=gsb_verdicts[0].analysis),
            risk=RiskVerdict(risky=ensemble_risky(risk_verdicts), analysis=risk_verdicts[0].analysis),
            human_score=ensemble_human_score(human_verdicts),
        )

    def reject_sample(
        self,
        dialogue: DialogueContext,
        cfg: StageConfig,
        temperature_bump: float = 0.0,
        mode: CotMode | None = None,
    ) -> SelectionOutcome:
        """Sample candidates, filter on comparison and risk, keep the most human-like.

        Only candidates judged strictly better than the reference and free of
        risk survive; ties on the human-likeness score break toward the lowest
        candidate index.
        """
        if dialogue.reference_response is None:
            raise IneligibleDialogue("rejection sampling needs a reference response")
        if mode is None:
            mode = self._resolve_mode(cfg.cot_mode, cfg.hybrid_ratio)
        sampled = self._sample_candidates(dialogue, cfg, mode, cfg.n_candidates, temperature_bump)

        judgments: list[CandidateJudgments] = []
        candidates: list[CandidatePair | None] = []
        for text, _generator in sampled:
            try:
                pair = parse_candidate(text, mode)
            except MalformedStructure as exc:
                candidates.append(None)
                judgments.append(CandidateJudgments(error=f"malformed candidate: {exc}"))
                continue
            pair = replace(pair, origin=Origin.SAMPLED)
            try:
                judgments.append(self._judge_candidate(dialogue, pair, cfg))
            except ParseFailure as exc:
                judgments.append(CandidateJudgments(error=f"judge parse failure: {exc}"))
                candidates.append(None)
                continue
            candidates.append(pair)

        best_index: int | None = None
        best_score = float("-inf")
        for index, (pair, verdicts) in enumerate(zip(candidates, judgments)):
            if pair is None or verdicts.gsb is None or verdicts.risk is None:
                continue
            if verdicts.gsb.value is not GsbLabel.GOOD or verdicts.risk.risky:
                continue
            assert verdicts.human_score is not None
            if verdicts.human_score > best_score:
                best_score = verdicts.human_score
                best_index = index

        if best_index is None:
            return SelectionOutcome(
                selected=None, verdicts=tuple(judgments), disposition=Disposition.ALL_FILTERED
            )
        return SelectionOutcome(
            selected=candidates[best_index],
            verdicts=tuple(judgments),
            disposition=Disposition.SELECTED,
            selected_index=best_index,
        )

    def run_reject_stage(
        self, corpus: Iterable[DialogueContext], cfg: StageConfig, retry_temperature_bump: float = 0.2
    ) -> Iterator[tuple[DialogueContext, SelectionOutcome]]:
        """Reject-sample a corpus; all-filtered dialogues get one hotter retry."""
        eligible: list[tuple[DialogueContext, CotMode]] = []
        for dialogue in corpus:
            self.counters.bump("dialogues_in")
            if dialogue.reference_response is None:
                self.counters.bump("skipped_no_reference")
                logger.info("dialogue %s skipped: no reference response", dialogue.dialogue_id)
                continue
            # draw the record mode up front so worker scheduling cannot reorder rng use
            eligible.append((dialogue, self._resolve_mode(cfg.cot_mode, cfg.hybrid_ratio)))

        def select(item: tuple[DialogueContext, CotMode]) -> SelectionOutcome | None:
            dialogue, mode = item
            try:
                outcome = self.reject_sample(dialogue, cfg, mode=mode)
                if outcome.disposition is Disposition.ALL_FILTERED:
                    self.counters.bump("retried_all_filtered")
                    outcome = self.reject_sample(
                        dialogue, cfg, temperature_bump=retry_temperature_bump, mode=mode
                    )
                return outcome
            except GenerationFailure:
                self.counters.bump("generation_failures")
                logger.warning("dialogue %s dropped: generation failed", dialogue.dialogue_id)
                return None
            except GatewayError as exc:
                self.counters.bump("gateway_failures")
                logger.warning("dialogue %s dropped: %s", dialogue.dialogue_id, exc)
                return None

        for (dialogue, _mode), outcome in zip(eligible, self._fan_out(select, eligible)):
            if outcome is None:
                continue
            if outcome.disposition is Disposition.SELECTED:
                self.counters.bump("selected")
            else:
                self.counters.bump("all_filtered")
            yield dialogue, outcome

    # -- refine -----------------------------------------------------------------

    def refine(
        self, pair: CandidatePair, dialogue: DialogueContext, cfg: StageConfig
    ) -> RefineOutcome:
        """Rewrite a pair against the stage criteria; keep it only if judged no worse."""
        criteria = cfg.refine_criteria or _STAGE_CRITERIA.get(cfg.stage) or frozenset(
            {RefineCriterion.HUMAN_LIKENESS}
        )
        human_judges = cfg.judges_for("human")
        original_score = ensemble_human_score(
            self._judges.judge_human_likeness(dialogue, pair, judge) for judge in human_judges
        )
        prompt = self._build_refine_prompt(dialogue, pair, criteria)
        writer = cfg.generator_profiles[0]
        try:
            completion = self._gateway.complete(writer, prompt, n=1)[0].text
            refined = replace(parse_candidate(completion, pair.mode), origin=Origin.REFINED)
        except (GatewayError, MalformedStructure) as exc:
            logger.info("refine output rejected for %s: %s", dialogue.dialogue_id, exc)
            return RefineOutcome(pair=pair, improved=False, original_score=original_score)

        try:
            refined_score = ensemble_human_score(
                self._judges.judge_human_likeness(dialogue, refined, judge)
                for judge in human_judges
            )
            if RefineCriterion.MULTI_TURN in criteria:
                multiturn_ok = all(
                    self._judges.judge_multiturn(dialogue, refined, judge).passes
                    for judge in cfg.judges_for("multiturn")
                )
            else:
                multiturn_ok = True
        except ParseFailure:
            return RefineOutcome(pair=pair, improved=False, original_score=original_score)

        if refined_score >= original_score and multiturn_ok:
            return RefineOutcome(
                pair=refined, improved=True, original_score=original_score, refined_score=refined_score
            )
        return RefineOutcome(
            pair=pair, improved=False, original_score=original_score, refined_score=refined_score
        )

    def run_refine_stage(
        self, records: Iterable[tuple[DialogueContext, CandidatePair]], cfg: StageConfig
    ) -> Iterator[tuple[DialogueContext, CandidatePair]]:
        for dialogue, pair in records:
            self.counters.bump("dialogues_in")
            outcome = self.refine(pair, dialogue, cfg)
            self.counters.bump("refined_kept" if outcome.improved else "refined_not_improved")
            yield dialogue, outcome.pair

    # -- emission ----------------------------------------------------------------

    def emit_sft_corpus(
        self,
        records: Iterable[tuple[DialogueContext, CandidatePair]],
        mode: CotMode,
        sink: str | Path,
        stage_tag: str,
        hybrid_ratio: float = 0.5,
    ) -> int:
        """Write training records as JSON Lines; every target re-parses cleanly."""
        count = 0
        with open(sink, "w", encoding="utf-8") as handle:
            for dialogue, pair in records:
                record_mode = self._resolve_mode(mode, hybrid_ratio)
                target = serialize_candidate(pair, record_mode)
                if compute_format_reward(target, record_mode) != 1:
                    raise MalformedStructure(
                        f"record for {dialogue.dialogue_id} does not round-trip its mode"
                    )
                row = {
                    "dialogue_id": dialogue.dialogue_id,
                    "rendered_prompt": self.build_generation_prompt(dialogue, record_mode),
                    "target": target,
                    "stage": stage_tag,
                    "cot_mode": record_mode.value,
                }
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")
                count += 1
        self.counters.bump("records_out", count)
        return count

    def emit_rollout_batches(
        self,
        dialogues: Iterable[DialogueContext],
        cfg: StageConfig,
        weights: RewardWeights,
        group_size: int,
        triage_engine=None,
        advantage_epsilon: float = 1e-6,
    ) -> Iterator[RolloutGroup]:
        """Sample a rollout group per dialogue and score it for an external trainer.

        Basic stages score judge rewards only; hard stages add the rule rewards
        and the hallucination penalty (the latter needs a triage engine).
        """
        if group_size < 2:
            raise ValueError("group_size must be >= 2")
        if cfg.stage is Stage.THINK:
            raise ValueError("the think stage emits no rollouts")
        effective = weights
        if not cfg.stage.is_hard:
            effective = replace(weights, alpha1=0.0, alpha2=0.0, alpha3=0.0, gamma=0.0)

        for dialogue in dialogues:
            self.counters.bump("dialogues_in")
            if dialogue.reference_response is None:
                self.counters.bump("skipped_no_reference")
                logger.info("dialogue %s skipped: no reference response", dialogue.dialogue_id)
                continue
            mode = self._resolve_mode(cfg.cot_mode, cfg.hybrid_ratio)
            halluc_draws = [self._rng.random() for _ in range(group_size)]
            try:
                sampled = self._sample_candidates(dialogue, cfg, mode, group_size)
            except GenerationFailure:
                self.counters.bump("generation_failures")
                continue
            try:
                group = self._score_group(
                    dialogue, sampled, mode, cfg, effective, halluc_draws, triage_engine,
                    advantage_epsilon,
                )
            except ParseFailure:
                self.counters.bump("judge_failures")
                logger.warning("dialogue %s dropped: judge output unparseable", dialogue.dialogue_id)
                continue
            except GatewayError as exc:
                self.counters.bump("gateway_failures")
                logger.warning("dialogue %s dropped: %s", dialogue.dialogue_id, exc)
                continue
            self.counters.bump("groups_out")
            yield group

    def _score_group(
        self,
        dialogue: DialogueContext,
        sampled: Sequence[tuple[str, str]],
        mode: CotMode,
        cfg: StageConfig,
        weights: RewardWeights,
        halluc_draws: Sequence[float],
        triage_engine,
        advantage_epsilon: float,
    ) -> RolloutGroup:
        assert dialogue.reference_response is not None
        assert dialogue.reference_length is not None
        pairs: list[CandidatePair] = []
        vectors: list[RewardVector] = []
        for slot, (text, _generator) in enumerate(sampled):
            try:
                pair = replace(parse_candidate(text, mode), origin=Origin.SAMPLED)
                parsed = True
            except MalformedStructure:
                pair = CandidatePair(cot="", answer=text, mode=mode, origin=Origin.SAMPLED)
                parsed = False
            pairs.append(pair)

            judged_text = render_candidate(pair) if parsed else text
            human_verdicts = [
                self._judges.judge_human_likeness_text(dialogue, judged_text, judge)
                for judge in cfg.judges_for("human")
            ]
            gsb_verdicts = [
                self._judges.judge_gsb_text(dialogue, pair.answer, dialogue.reference_response, judge)
                for judge in cfg.judges_for("gsb")
            ]
            risk_verdicts = [
                self._judges.judge_risk_text(dialogue, judged_text, judge)
                for judge in cfg.judges_for("risk")
            ]
            r_human = (ensemble_human_score(human_verdicts) - 1) / 4
            r_gsb = {GsbLabel.GOOD: 1.0, GsbLabel.SAME: 0.5, GsbLabel.BAD: 0.0}[
                ensemble_gsb(gsb_verdicts)
            ]
            r_risk = 0.0 if ensemble_risky(risk_verdicts) else 1.0

            r_format = 0.0
            r_length = 0.0
            r_match = 0.0
            r_halluc = 0.0
            if cfg.stage.is_hard:
                r_format = float(compute_format_reward(text, mode))
                if parsed:
                    r_length = compute_length_reward(
                        self._length_fn(pair.answer), dialogue.reference_length, weights.rho
                    )
                r_match = float(compute_match_reward(pair.answer, self._ruleset)[0])
                if triage_engine is not None and halluc_draws[slot] < cfg.halluc_sample_rate:
                    r_halluc = float(triage_engine.hallucination_reward(dialogue, pair.answer))
            vectors.append(
                RewardVector.build(
                    r_format=r_format,
                    r_length=r_length,
                    r_match=r_match,
                    r_human=r_human,
                    r_risk=r_risk,
                    r_gsb=r_gsb,
                    r_halluc=r_halluc,
                    weights=weights,
                )
            )

        totals = [v.total for v in vectors]
        advantages = compute_group_advantages(totals, epsilon=advantage_epsilon)
        return RolloutGroup(
            prompt_id=dialogue.dialogue_id,
            candidates=tuple(pairs),
            completions=tuple(text for text, _ in sampled),
            rewards=tuple(totals),
            advantages=tuple(advantages),
        )


def write_rollout_groups(groups: Iterable[RolloutGroup], sink: str | Path) -> int:
    count = 0
    with open(sink, "w", encoding="utf-8") as handle:
        for group in groups:
            handle.write(json.dumps(group.to_payload(), ensure_ascii=False) + "\n")
            count += 1
    return count
