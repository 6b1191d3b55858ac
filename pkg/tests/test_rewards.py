from __future__ import annotations

import random
import re
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialogforge.core import CotMode, MalformedStructure, RewardWeights, parse_candidate
from dialogforge.judges import GsbLabel, GsbVerdict, HumanLikenessVerdict, RiskVerdict
from dialogforge.rewards import (
    GroupTooSmall,
    InvalidReference,
    RewardVector,
    RolloutGroup,
    RuleSet,
    aggregate_reward,
    compute_format_reward,
    compute_group_advantages,
    compute_length_reward,
    compute_match_reward,
    normalize_judge_rewards,
)


# -- format reward -----------------------------------------------------------

def test_format_reward_accepts_valid_pre_cot() -> None:
    assert compute_format_reward("<think>t</think><answer>a</answer>", CotMode.PRE_COT) == 1


def test_format_reward_rejects_missing_think() -> None:
    assert compute_format_reward("<answer>a</answer>", CotMode.PRE_COT) == 0


def _fuzz_tagged_string(rng: random.Random) -> str:
    pieces = ["<think>", "</think>", "<answer>", "</answer>", "abc", " ", "<", ">", "x</answer>"]
    return "".join(rng.choice(pieces) for _ in range(rng.randint(0, 8)))


@pytest.mark.parametrize("mode", [CotMode.PRE_COT, CotMode.POST_COT])
def test_format_reward_equals_parse_success_over_fuzz(mode: CotMode) -> None:
    rng = random.Random(7)
    for _ in range(1000):
        text = _fuzz_tagged_string(rng)
        try:
            parse_candidate(text, mode)
            parse_ok = True
        except MalformedStructure:
            parse_ok = False
        assert compute_format_reward(text, mode) == (1 if parse_ok else 0)


# -- length reward ------------------------------------------------------------

def test_length_reward_documented_triple() -> None:
    assert compute_length_reward(100, 100, 0.5) == pytest.approx(0.0, abs=1e-9)
    assert compute_length_reward(125, 100, 0.5) == pytest.approx(-0.5, abs=1e-9)
    assert compute_length_reward(151, 100, 0.5) == pytest.approx(-1.0, abs=1e-9)


def test_length_reward_rejects_zero_reference() -> None:
    with pytest.raises(InvalidReference):
        compute_length_reward(10, 0, 0.5)


def test_length_reward_monotone_and_continuous() -> None:
    l_ref, rho = 200, 0.3
    cache = rho * l_ref
    previous = 0.0
    for y_len in range(0, 400):
        value = compute_length_reward(y_len, l_ref, rho)
        assert value <= previous + 1e-12
        previous = value
    assert compute_length_reward(l_ref, l_ref, rho) == pytest.approx(0.0, abs=1e-12)
    assert compute_length_reward(int(l_ref + cache), l_ref, rho) == pytest.approx(-1.0, abs=1e-12)


# -- match reward ---------------------------------------------------------------

def test_match_reward_hits_prohibited_term() -> None:
    rules = RuleSet(prohibited_terms=("guaranteed refund",))
    reward, matched = compute_match_reward("We offer a GUARANTEED refund today", rules)
    assert reward == -1
    assert matched == ("guaranteed refund",)


def test_match_reward_empty_ruleset_matches_nothing() -> None:
    reward, matched = compute_match_reward("anything goes", RuleSet())
    assert reward == 0
    assert matched == ()


def test_match_reward_regex_rule() -> None:
    rules = RuleSet(regex_rules=((re.compile(r"\b\d{16}\b"), "card number"),))
    reward, matched = compute_match_reward("card 1234567812345678 noted", rules)
    assert (reward, matched) == (-1, ("card number",))


def test_match_reward_agrees_with_naive_scan() -> None:
    terms = ("refund now", "blame the seller", "legal liability")
    rules = RuleSet(prohibited_terms=terms)
    rng = random.Random(11)
    vocabulary = ["refund", "now", "blame", "the", "seller", "legal", "liability", "ok", "sorry"]
    for _ in range(500):
        text = " ".join(rng.choice(vocabulary) for _ in range(rng.randint(0, 12)))
        naive = any(term in text.casefold() for term in terms)
        assert compute_match_reward(text, rules)[0] == (-1 if naive else 0)


# -- judge normalization ----------------------------------------------------------

def test_normalize_judge_rewards_maxima() -> None:
    triple = normalize_judge_rewards(
        HumanLikenessVerdict(score=5),
        GsbVerdict(value=GsbLabel.GOOD),
        RiskVerdict(risky=False),
    )
    assert triple == (1.0, 1.0, 1.0)


def test_normalize_judge_rewards_minima() -> None:
    triple = normalize_judge_rewards(
        HumanLikenessVerdict(score=1),
        GsbVerdict(value=GsbLabel.BAD),
        RiskVerdict(risky=True),
    )
    assert triple == (0.0, 0.0, 0.0)


def test_normalize_judge_rewards_midpoints() -> None:
    triple = normalize_judge_rewards(
        HumanLikenessVerdict(score=3),
        GsbVerdict(value=GsbLabel.SAME),
        RiskVerdict(risky=False),
    )
    assert triple == (0.5, 0.5, 1.0)


# -- aggregation --------------------------------------------------------------------

def test_aggregate_all_best_components() -> None:
    total = aggregate_reward(1, 0, 0, 1, 1, 1, 0, RewardWeights())
    assert total == pytest.approx(3.2, abs=1e-9)


def test_aggregate_all_zero_components() -> None:
    assert aggregate_reward(0, 0, 0, 0, 0, 0, 0, RewardWeights()) == 0.0


def test_aggregate_hallucination_dominates() -> None:
    total = aggregate_reward(1, 0, 0, 1, 1, 1, -1, RewardWeights())
    assert total == pytest.approx(-1.8, abs=1e-9)


def test_aggregate_linear_in_each_component() -> None:
    rng = random.Random(3)
    weights = RewardWeights()
    slopes = {
        "r_format": weights.alpha1,
        "r_length": weights.alpha2,
        "r_match": weights.alpha3,
        "r_human": weights.beta1,
        "r_risk": weights.beta2,
        "r_gsb": weights.beta3,
        "r_halluc": weights.gamma,
    }
    names = list(slopes)
    for _ in range(200):
        base = {name: rng.uniform(-1, 1) for name in names}
        target = rng.choice(names)
        delta = rng.uniform(0.1, 2.0)
        bumped = dict(base)
        bumped[target] = base[target] + delta
        diff = aggregate_reward(**bumped, weights=weights) - aggregate_reward(**base, weights=weights)
        assert diff == pytest.approx(slopes[target] * delta, rel=1e-9, abs=1e-9)


def test_reward_vector_validates_ranges() -> None:
    weights = RewardWeights()
    vector = RewardVector.build(
        r_format=1, r_length=-0.25, r_match=0, r_human=0.75, r_risk=1, r_gsb=0.5,
        r_halluc=0, weights=weights,
    )
    assert vector.total == pytest.approx(
        0.2 * 1 + 0.5 * -0.25 + 0 + 0.75 + 1 + 0.5, abs=1e-12
    )
    with pytest.raises(ValueError):
        RewardVector.build(
            r_format=0.5, r_length=0, r_match=0, r_human=0, r_risk=0, r_gsb=0,
            r_halluc=0, weights=weights,
        )
    with pytest.raises(ValueError):
        RewardVector.build(
            r_format=1, r_length=0.5, r_match=0, r_human=0, r_risk=0, r_gsb=0,
            r_halluc=0, weights=weights,
        )


# -- group advantages ------------------------------------------------------------------

def test_advantages_zero_variance_group() -> None:
    assert compute_group_advantages([1.0, 1.0, 1.0, 1.0]) == [0.0, 0.0, 0.0, 0.0]


def test_advantages_two_point_group_exact() -> None:
    assert compute_group_advantages([0.0, 2.0], epsilon=0.0) == [-1.0, 1.0]


def test_advantages_group_too_small() -> None:
    with pytest.raises(GroupTooSmall):
        compute_group_advantages([1.0])


def test_advantages_match_statistics_oracle() -> None:
    rng = random.Random(5)
    for _ in range(200):
        rewards = [rng.uniform(-3, 3) for _ in range(16)]
        advantages = compute_group_advantages(rewards, epsilon=0.0)
        mean = statistics.fmean(rewards)
        std = statistics.pstdev(rewards)
        expected = [(r - mean) / std for r in rewards]
        assert advantages == pytest.approx(expected, abs=1e-12)
        assert abs(statistics.fmean(advantages)) < 1e-9
        assert abs(statistics.pstdev(advantages) - 1.0) < 1e-6


@settings(max_examples=100)
@given(
    rewards=st.lists(st.floats(-10, 10), min_size=2, max_size=32),
    shift=st.floats(-5, 5),
)
def test_advantages_translation_invariant(rewards: list[float], shift: float) -> None:
    base = compute_group_advantages(rewards)
    shifted = compute_group_advantages([r + shift for r in rewards])
    assert shifted == pytest.approx(base, abs=1e-6)


@settings(max_examples=100)
@given(
    rewards=st.lists(st.floats(-10, 10), min_size=2, max_size=32),
    scale=st.floats(0.1, 7.0),
)
def test_advantages_scaling_preserves_argmax(rewards: list[float], scale: float) -> None:
    base = compute_group_advantages(rewards)
    scaled = compute_group_advantages([r * scale for r in rewards])
    assert base.index(max(base)) == scaled.index(max(scaled))


# -- rollout groups ----------------------------------------------------------------------

def test_rollout_group_payload_schema() -> None:
    from dialogforge.core import CandidatePair

    pairs = (
        CandidatePair(cot="a", answer="x"),
        CandidatePair(cot="b", answer="y"),
    )
    group = RolloutGroup(
        prompt_id="p1",
        candidates=pairs,
        completions=("<think>a</think><answer>x</answer>", "<think>b</think><answer>y</answer>"),
        rewards=(1.0, 2.0),
        advantages=(-1.0, 1.0),
    )
    payload = group.to_payload()
    assert set(payload) == {"prompt_id", "candidates", "rewards", "advantages"}
    assert payload["candidates"][0].startswith("<think>")


def test_rollout_group_rejects_mismatched_lengths() -> None:
    from dialogforge.core import CandidatePair

    with pytest.raises(ValueError):
        RolloutGroup(
            prompt_id="p1",
            candidates=(CandidatePair(cot="a", answer="x"),),
            completions=("t", "u"),
            rewards=(1.0,),
            advantages=(0.0,),
        )


def test_ruleset_from_payload_compiles_and_casefolds() -> None:
    ruleset = RuleSet.from_payload(
        {
            "prohibited_terms": ["Guaranteed Refund"],
            "regex_rules": [{"pattern": "compensat(e|ion)", "description": "compensation promise"}],
        }
    )
    assert ruleset.prohibited_terms == ("guaranteed refund",)
    assert compute_match_reward("we will compensate you", ruleset)[0] == -1
