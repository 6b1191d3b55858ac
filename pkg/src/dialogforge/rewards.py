"""Rule-based rewards, judge-reward normalization, aggregation, and group advantages."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .core import CandidatePair, CotMode, MalformedStructure, RewardWeights, parse_candidate
from .judges import GsbLabel, GsbVerdict, HumanLikenessVerdict, RiskVerdict


class InvalidReference(ValueError):
    """Length reward was asked to use a non-positive reference length."""


class GroupTooSmall(ValueError):
    """Group-relative advantages need at least two rollouts."""


@dataclass(frozen=True)
class RuleSet:
    """Prohibited terms and regex rules used by the rule-match reward.

    Terms are matched as case-folded substrings; regexes are searched as
    given. An empty rule set is legal and matches nothing.
    """

    prohibited_terms: tuple[str, ...] = ()
    regex_rules: tuple[tuple[re.Pattern[str], str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "prohibited_terms", tuple(t.casefold() for t in self.prohibited_terms)
        )

    @classmethod
    def from_payload(cls, payload: dict) -> "RuleSet":
        compiled = tuple(
            (re.compile(item["pattern"]), item.get("description", item["pattern"]))
            for item in payload.get("regex_rules", [])
        )
        return cls(
            prohibited_terms=tuple(payload.get("prohibited_terms", [])),
            regex_rules=compiled,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RuleSet":
        with open(path, encoding="utf-8") as handle:
            return cls.from_payload(json.load(handle))


def compute_format_reward(text: str, mode: CotMode) -> int:
    """1 when the text carries exactly one well-ordered think/answer pair, else 0."""
    try:
        parse_candidate(text, mode)
    except MalformedStructure:
        return 0
    return 1


def compute_length_reward(y_len: int, l_ref: int, rho: float) -> float:
    """Soft overlong penalty: 0 within the reference length, ramping to -1
    across a cache window of rho * l_ref, and -1 beyond it."""
    if l_ref < 1:
        raise InvalidReference("reference length must be a positive integer")
    if rho <= 0:
        raise ValueError("rho must be positive")
    if y_len < 0:
        raise ValueError("y_len must be non-negative")
    cache = rho * l_ref
    if y_len <= l_ref:
        return 0.0
    if y_len <= l_ref + cache:
        return -(y_len - l_ref) / cache
    return -1.0


def compute_match_reward(text: str, rules: RuleSet) -> tuple[int, tuple[str, ...]]:
    """-1 when any prohibited term or regex matches the text, else 0.

    Returns the reward together with the descriptions of every matched rule
    for audit logging. Callers pass the answer segment of a candidate.
    """
    folded = text.casefold()
    matched: list[str] = [term for term in rules.prohibited_terms if term in folded]
    matched.extend(desc for pattern, desc in rules.regex_rules if pattern.search(text))
    return (-1 if matched else 0, tuple(matched))


def normalize_judge_rewards(
    human: HumanLikenessVerdict, gsb: GsbVerdict, risk: RiskVerdict
) -> tuple[float, float, float]:
    """Map judge verdicts onto [0, 1] reward components (human, gsb, risk)."""
    r_human = (human.score - 1) / 4
    r_gsb = {GsbLabel.GOOD: 1.0, GsbLabel.SAME: 0.5, GsbLabel.BAD: 0.0}[gsb.value]
    r_risk = 0.0 if risk.risky else 1.0
    return (r_human, r_gsb, r_risk)


def aggregate_reward(
    r_format: float,
    r_length: float,
    r_match: float,
    r_human: float,
    r_risk: float,
    r_gsb: float,
    r_halluc: float,
    weights: RewardWeights,
) -> float:
    """Weighted sum of the rule, judge, and hallucination reward categories."""
    rule = weights.alpha1 * r_format + weights.alpha2 * r_length + weights.alpha3 * r_match
    judge = weights.beta1 * r_human + weights.beta2 * r_risk + weights.beta3 * r_gsb
    return rule + judge + weights.gamma * r_halluc


_EPS = 1e-9


@dataclass(frozen=True)
class RewardVector:
    """Per-candidate reward components and their weighted total."""

    r_format: float
    r_length: float
    r_match: float
    r_human: float
    r_risk: float
    r_gsb: float
    r_halluc: float
    total: float

    def __post_init__(self) -> None:
        def near_any(value: float, allowed: tuple[float, ...]) -> bool:
            return any(abs(value - a) <= _EPS for a in allowed)

        if not near_any(self.r_format, (0.0, 1.0)):
            raise ValueError("r_format must be 0 or 1")
        if not -1.0 - _EPS <= self.r_length <= _EPS:
            raise ValueError("r_length must lie in [-1, 0]")
        if not near_any(self.r_match, (-1.0, 0.0)):
            raise ValueError("r_match must be -1 or 0")
        if not -_EPS <= self.r_human <= 1.0 + _EPS:
            raise ValueError("r_human must lie in [0, 1]")
        if not near_any(self.r_risk, (0.0, 1.0)):
            raise ValueError("r_risk must be 0 or 1")
        if not near_any(self.r_gsb, (0.0, 0.5, 1.0)):
            raise ValueError("r_gsb must be 0, 0.5, or 1")
        if not near_any(self.r_halluc, (-1.0, 0.0)):
            raise ValueError("r_halluc must be -1 or 0")

    @classmethod
    def build(
        cls,
        *,
        r_format: float,
        r_length: float,
        r_match: float,
        r_human: float,
        r_risk: float,
        r_gsb: float,
        r_halluc: float,
        weights: RewardWeights,
    ) -> "RewardVector":
        total = aggregate_reward(
            r_format, r_length, r_match, r_human, r_risk, r_gsb, r_halluc, weights
        )
        return cls(r_format, r_length, r_match, r_human, r_risk, r_gsb, r_halluc, total)


def compute_group_advantages(rewards: Sequence[float], epsilon: float = 1e-6) -> list[float]:
    """Normalize a group of rewards to zero-mean, unit-ish-scale advantages.

    Uses the population standard deviation; an all-equal group yields exact
    zeros regardless of epsilon.
    """
    if len(rewards) < 2:
        raise GroupTooSmall("advantage computation needs a group of at least 2")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if max(rewards) == min(rewards):
        return [0.0] * len(rewards)
    mean = math.fsum(rewards) / len(rewards)
    variance = math.fsum((r - mean) ** 2 for r in rewards) / len(rewards)
    std = math.sqrt(variance)
    return [(r - mean) / (std + epsilon) for r in rewards]


@dataclass(frozen=True)
class RolloutGroup:
    """One prompt's sampled rollouts with rewards and group-relative advantages.

    ``completions`` holds the raw model outputs (what a trainer consumes);
    ``candidates`` holds the parsed pairs, falling back to an untagged pair
    (empty reasoning, raw text as answer) for outputs that failed to parse.
    """

    prompt_id: str
    candidates: tuple[CandidatePair, ...]
    completions: tuple[str, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        lengths = {
            len(self.candidates),
            len(self.completions),
            len(self.rewards),
            len(self.advantages),
        }
        if len(lengths) != 1:
            raise ValueError("group fields must have equal lengths")
        if len(self.candidates) < 2:
            raise ValueError("rollout groups need at least 2 candidates")

    def to_payload(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "candidates": list(self.completions),
            "rewards": list(self.rewards),
            "advantages": list(self.advantages),
        }
