"""Acceptance suite: one test per release criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

from __future__ import annotations

import json
import random
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from dialogforge.cli import main
from dialogforge.core import (
    CandidatePair,
    CotMode,
    DialogueContext,
    MalformedStructure,
    RewardWeights,
    Role,
    Turn,
    parse_candidate,
    serialize_candidate,
)
from dialogforge.curation import CurationPipeline, Disposition, Stage, StageConfig
from dialogforge.evaluation import gsb_score
from dialogforge.gateway import Gateway, StubRule, StubScript, fingerprint
from dialogforge.judges import (
    DEFAULT_RISK_STANDARDS,
    JudgeSuite,
    ParseFailure,
    format_history,
    format_rag,
    render_candidate,
    render_template,
    parse_gsb,
    parse_hallucination,
    parse_human_likeness,
    parse_multiturn,
    parse_risk,
    parse_thought,
)
from dialogforge.rewards import (
    aggregate_reward,
    compute_format_reward,
    compute_group_advantages,
    compute_length_reward,
)
from dialogforge.triage import CaseStore, TriageEngine, TriageState, TERMINAL_STATES

from .conftest import make_dialogue, stub_profile

DATA = Path(__file__).parent / "data"


@contextmanager
def criterion(name: str, budget_s: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}: {time.perf_counter() - start:.3f}s (budget {budget_s}s)")
        raise
    elapsed = time.perf_counter() - start
    print(f"[PASS] {name}: {elapsed:.3f}s (budget {budget_s}s)")
    assert elapsed < budget_s, f"{name} exceeded its {budget_s}s budget ({elapsed:.3f}s)"


def test_length_reward_exactness() -> None:
    with criterion("length reward exactness", 1.0):
        assert compute_length_reward(100, 100, 0.5) == pytest.approx(0.0, abs=1e-9)
        assert compute_length_reward(125, 100, 0.5) == pytest.approx(-0.5, abs=1e-9)
        assert compute_length_reward(151, 100, 0.5) == pytest.approx(-1.0, abs=1e-9)

        l_ref, rho = 1000, 0.5
        cache = rho * l_ref
        previous = float("inf")
        for y_len in range(0, 10_000):
            value = compute_length_reward(y_len, l_ref, rho)
            assert value <= previous + 1e-12  # non-increasing
            previous = value
        # boundary continuity
        assert compute_length_reward(l_ref, l_ref, rho) == pytest.approx(0.0, abs=1e-9)
        assert compute_length_reward(l_ref + 1, l_ref, rho) == pytest.approx(-1 / cache, abs=1e-9)
        assert compute_length_reward(int(l_ref + cache), l_ref, rho) == pytest.approx(-1.0, abs=1e-9)
        assert compute_length_reward(int(l_ref + cache) + 1, l_ref, rho) == -1.0


def test_reward_aggregation() -> None:
    with criterion("reward aggregation", 1.0):
        weights = RewardWeights()
        assert aggregate_reward(1, 0, 0, 1, 1, 1, 0, weights) == pytest.approx(3.2, abs=1e-9)
        assert aggregate_reward(1, 0, 0, 1, 1, 1, -1, weights) == pytest.approx(-1.8, abs=1e-9)

        slopes = {
            "r_format": weights.alpha1,
            "r_length": weights.alpha2,
            "r_match": weights.alpha3,
            "r_human": weights.beta1,
            "r_risk": weights.beta2,
            "r_gsb": weights.beta3,
            "r_halluc": weights.gamma,
        }
        rng = random.Random(42)
        names = list(slopes)
        for _ in range(1000):
            base = {name: rng.uniform(-2, 2) for name in names}
            target = rng.choice(names)
            delta = rng.uniform(-1.5, 1.5)
            bumped = dict(base, **{target: base[target] + delta})
            observed = aggregate_reward(**bumped, weights=weights) - aggregate_reward(
                **base, weights=weights
            )
            assert observed == pytest.approx(slopes[target] * delta, rel=1e-9, abs=1e-9)


def _oracle_pick(scores: list[int], gsb_good: list[bool], risky: list[bool]) -> int | None:
    """Brute-force filter+argmax over every candidate."""
    best: int | None = None
    for index in range(len(scores)):
        if not gsb_good[index] or risky[index]:
            continue
        if best is None or scores[index] > scores[best]:
            best = index
    return best


def test_rejection_sampling_oracle_equivalence() -> None:
    with criterion("rejection sampling oracle equivalence", 5.0):
        rng = random.Random(20240818)
        suite_for_templates = JudgeSuite(Gateway())
        human_template = suite_for_templates.template("human_likeness")
        gsb_template = suite_for_templates.template("gsb")
        risk_template = suite_for_templates.template("risk")

        responses: dict[str, object] = {}
        cases = []
        gen_probe = CurationPipeline(Gateway(), suite_for_templates, random.Random(0))
        for k in range(500):
            dialogue = make_dialogue(dialogue_id=f"oc-{k}", query=f"oracle case {k}?")
            n = 8
            scores = [rng.randint(1, 5) for _ in range(n)]
            gsb_labels = [rng.choice(["Good", "Good", "Same", "Bad"]) for _ in range(n)]
            risky = [rng.random() < 0.35 for _ in range(n)]
            completions = [
                f"<think>c{i}</think><answer>oc{k}-i{i}</answer>" for i in range(n)
            ]
            gen_prompt = gen_probe.build_generation_prompt(dialogue, CotMode.PRE_COT)
            responses[fingerprint(gen_prompt)] = completions
            history = format_history(dialogue)
            rag = format_rag(dialogue)
            for i in range(n):
                pair = CandidatePair(cot=f"c{i}", answer=f"oc{k}-i{i}")
                human_prompt = render_template(
                    human_template, history=history, query=dialogue.query, rag=rag,
                    response=render_candidate(pair),
                )
                responses[fingerprint(human_prompt)] = f"[Score] {scores[i]}"
                gsb_prompt = render_template(
                    gsb_template, history=history, query=dialogue.query, rag=rag,
                    response_a=dialogue.reference_response, response_b=pair.answer,
                )
                responses[fingerprint(gsb_prompt)] = f"[GSB Evaluation Result] {gsb_labels[i]}"
                risk_prompt = render_template(
                    risk_template, history=history, query=dialogue.query, rag=rag,
                    response=render_candidate(pair), risk_standards=DEFAULT_RISK_STANDARDS,
                )
                responses[fingerprint(risk_prompt)] = (
                    "[Risk Judgment] Yes" if risky[i] else "[Risk Judgment] No"
                )
            cases.append((dialogue, scores, [g == "Good" for g in gsb_labels], risky))

        gateway = Gateway(stub_script=StubScript(responses=responses))
        pipeline = CurationPipeline(gateway, JudgeSuite(gateway), random.Random(1))
        cfg = StageConfig(
            stage=Stage.BASIC_REJECT,
            generator_profiles=(stub_profile(name="gen"),),
            judge_profiles={
                "human": (stub_profile(name="judge"),),
                "gsb": (stub_profile(name="judge"),),
                "risk": (stub_profile(name="judge"),),
            },
            n_candidates=8,
            cot_mode=CotMode.PRE_COT,
        )
        all_filtered = 0
        for dialogue, scores, gsb_good, risky in cases:
            outcome = pipeline.reject_sample(dialogue, cfg)
            expected = _oracle_pick(scores, gsb_good, risky)
            if expected is None:
                assert outcome.disposition is Disposition.ALL_FILTERED
                assert outcome.selected is None
                all_filtered += 1
            else:
                assert outcome.disposition is Disposition.SELECTED
                assert outcome.selected_index == expected
                assert outcome.selected is not None
                assert outcome.selected.answer == f"oc{dialogue.dialogue_id[3:]}-i{expected}"
        assert all_filtered > 0  # the random mix must exercise the empty-survivor path


def test_group_relative_advantages() -> None:
    with criterion("group-relative advantages", 2.0):
        rng = random.Random(99)
        for _ in range(1000):
            group = [rng.uniform(-4, 4) for _ in range(16)]
            advantages = compute_group_advantages(group, epsilon=0.0)
            mean = sum(advantages) / len(advantages)
            assert abs(mean) < 1e-9
            variance = sum((a - mean) ** 2 for a in advantages) / len(advantages)
            assert abs(variance**0.5 - 1.0) < 1e-6
        assert compute_group_advantages([2.5] * 16) == [0.0] * 16


def test_triage_state_machine_exhaustive() -> None:
    with criterion("triage state machine (4x4x2 exhaustive)", 1.0):
        labels = {
            "clean": "[Judgment Result]\nNo Hallucination\n[Judgment Reason]\nNone",
            "rag": "[Judgment Result]\nImproper Utilization of RAG\n[Judgment Reason]\nWrong KB.",
            "context": "[Judgment Result]\nContradictions with Context\n[Judgment Reason]\nConflicts with turn 2.",
            "feedback": "[Judgment Result]\nUser feedback indicating hallucinations\n[Judgment Reason]\nUser objected.",
        }
        rules = []
        for d_name, d_completion in labels.items():
            for v_name, v_completion in labels.items():
                marker = f"combo-{d_name}-{v_name}"
                rules.append(StubRule(contains=(marker,), completion=d_completion, endpoint="detector"))
                rules.append(StubRule(contains=(marker,), completion=v_completion, endpoint="verifier"))
        rules.append(StubRule(contains=("[Annotator Reason]",), completion="optimized rationale"))
        gateway = Gateway(stub_script=StubScript(rules=tuple(rules)))
        suite = JudgeSuite(gateway)

        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            store_dir = Path(tmp) / "store"
            expected_states: dict[str, TriageState] = {}
            with CaseStore(store_dir) as store:
                engine = TriageEngine(
                    store, suite,
                    detector=stub_profile(name="detector"),
                    verifiers=[stub_profile(name="verifier")],
                    optimizer=stub_profile(name="optimizer"),
                )
                for d_name in labels:
                    for v_name in labels:
                        for human_confirms in (True, False):
                            case_id = f"case-{d_name}-{v_name}-{int(human_confirms)}"
                            response = f"combo-{d_name}-{v_name} response"
                            case = engine.detect(make_dialogue(), response, case_id)
                            if case.state is TriageState.AWAITING_VERIFIER:
                                case = engine.verify(case_id)
                            if case.state is TriageState.AWAITING_HUMAN:
                                case = engine.submit_human_verdict(
                                    case_id, human_confirms,
                                    "confirmed reason" if human_confirms else "",
                                    "annotator",
                                )
                            if case.state is TriageState.VERIFIED_HALLUC:
                                case = engine.optimize_reason(case_id)
                            assert case.state in TERMINAL_STATES, case.case_id
                            if d_name == "clean" and v_name == "clean":
                                assert case.state is TriageState.SIMPLE_NON_HALLUC
                            elif human_confirms:
                                assert case.state is TriageState.REASON_OPTIMIZED
                            else:
                                assert case.state is TriageState.HARD_NON_HALLUC
                            expected_states[case_id] = case.state
                assert len(expected_states) == 32

                # every audit transition sits in the legal set
                from dialogforge.triage import LEGAL_TRANSITIONS

                audit_events = [
                    json.loads(line)
                    for line in (store_dir / "audit.jsonl").read_text().splitlines()
                ]
                for event in audit_events:
                    if event["event"] == "transition":
                        source = TriageState(event["from"])
                        target = TriageState(event["to"])
                        assert target in LEGAL_TRANSITIONS[source]

            # replaying the audit log reconstructs every case
            with CaseStore(store_dir) as replayed:
                for case_id, state in expected_states.items():
                    assert replayed.get(case_id).state is state


def test_gsb_metric() -> None:
    with criterion("comparison metric", 1.0):
        assert gsb_score(5, 3, 2) == pytest.approx(0.3, abs=1e-12)
        assert gsb_score(0, 10, 0) == 0.0
        rng = random.Random(7)
        for _ in range(1000):
            good, same, bad = rng.randint(0, 40), rng.randint(0, 40), rng.randint(0, 40)
            if good + same + bad == 0:
                continue
            assert gsb_score(good, same, bad) == pytest.approx(
                -gsb_score(bad, same, good), abs=1e-12
            )
            assert -1.0 <= gsb_score(good, same, bad) <= 1.0


def _fuzz_candidates(rng: random.Random, count: int) -> list[str]:
    tags = ["<think>", "</think>", "<answer>", "</answer>"]
    texts = []
    for _ in range(count):
        kind = rng.random()
        if kind < 0.35:
            # valid-ish skeleton with random payloads and optional mutations
            cot = "".join(rng.choice("abcXYZ 0,.!") for _ in range(rng.randint(0, 10)))
            answer = "".join(rng.choice("abcXYZ 0,.!") for _ in range(rng.randint(0, 10)))
            mode = rng.choice([CotMode.PRE_COT, CotMode.POST_COT])
            pair_text = (
                f"<think>{cot}</think><answer>{answer}</answer>"
                if mode is CotMode.PRE_COT
                else f"<answer>{answer}</answer><think>{cot}</think>"
            )
            if rng.random() < 0.4:  # mutate
                mutation = rng.choice(["dup", "strip", "inject", "swap"])
                if mutation == "dup":
                    pair_text += rng.choice(tags)
                elif mutation == "strip":
                    pair_text = pair_text.replace(rng.choice(tags), "", 1)
                elif mutation == "inject":
                    pair_text = "x" + pair_text
                else:
                    pair_text = pair_text.replace("<think>", "\0", 1).replace(
                        "<answer>", "<think>", 1
                    ).replace("\0", "<answer>", 1)
            texts.append(pair_text)
        elif kind < 0.7:
            texts.append("".join(rng.choice(tags + ["pay", "load", " "]) for _ in range(rng.randint(0, 7))))
        else:
            texts.append("".join(rng.choice("<>/thinkanswer ab") for _ in range(rng.randint(0, 30))))
    return texts


def test_format_parse_equivalence() -> None:
    with criterion("format/parse equivalence", 5.0):
        rng = random.Random(314159)
        for mode in (CotMode.PRE_COT, CotMode.POST_COT):
            for text in _fuzz_candidates(rng, 10_000):
                try:
                    parse_candidate(text, mode)
                    parsed = True
                except MalformedStructure:
                    parsed = False
                assert compute_format_reward(text, mode) == (1 if parsed else 0), repr(text)

        alphabet = "abcdefXYZ 0123,.!?é中文"
        for _ in range(1000):
            cot = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 25)))
            answer = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 25)))
            mode = rng.choice([CotMode.PRE_COT, CotMode.POST_COT])
            pair = CandidatePair(cot=cot, answer=answer, mode=mode)
            parsed_pair = parse_candidate(serialize_candidate(pair, mode), mode)
            assert (parsed_pair.cot, parsed_pair.answer) == (cot, answer)


def _e2e_config(tmp_path: Path, tag: str) -> Path:
    document = {
        "seed": 4242,
        "store_path": str(tmp_path / f"store-{tag}"),
        "ruleset_path": str(DATA / "rules.json"),
        "stub": {"path": str(DATA / "stub_e2e.json")},
        "endpoints": {
            "stub-gen": {"base_url": "stub://gen", "model_id": "stub"},
            "stub-judge": {"base_url": "stub://judge", "model_id": "stub"},
        },
        "judges": {
            "human": ["stub-judge"],
            "gsb": ["stub-judge"],
            "risk": ["stub-judge"],
            "multiturn": ["stub-judge"],
            "mining": ["stub-judge"],
            "hallucination_detector": ["stub-judge"],
        },
        "stages": {
            "think": {"stage": "think"},
            "basic_reject": {"stage": "basic_reject", "generators": ["stub-gen"], "n_candidates": 8},
            "basic_refine": {"stage": "basic_refine", "generators": ["stub-gen"]},
        },
    }
    path = tmp_path / f"engine-{tag}.json"
    path.write_text(json.dumps(document, indent=2), encoding="utf-8")
    return path


def test_end_to_end_dry_run(tmp_path) -> None:
    with criterion("end-to-end pipeline determinism", 10.0):
        outputs = {}
        for run in ("one", "two"):
            config = _e2e_config(tmp_path, run)
            base = tmp_path / run
            base.mkdir()
            traces = base / "traces.jsonl"
            selected = base / "selected.jsonl"
            refined = base / "refined.jsonl"
            corpus = base / "sft.jsonl"
            assert main(["think", "--config", str(config), "--seed", "4242",
                         "--input", str(DATA / "dialogues_20.jsonl"), "--output", str(traces)]) == 0
            assert main(["reject-sample", "--config", str(config), "--seed", "4242",
                         "--input", str(DATA / "dialogues_20.jsonl"), "--output", str(selected)]) == 0
            assert main(["refine", "--config", str(config), "--seed", "4242",
                         "--input", str(selected), "--output", str(refined)]) == 0
            assert main(["emit-sft", "--config", str(config), "--seed", "4242", "--mode", "hybrid_cot",
                         "--input", str(refined), "--output", str(corpus)]) == 0
            outputs[run] = tuple(
                path.read_bytes() for path in (traces, selected, refined, corpus)
            )
            rows = [json.loads(line) for line in corpus.read_text().splitlines()]
            assert len(rows) == 20
            for row in rows:
                assert compute_format_reward(row["target"], CotMode(row["cot_mode"])) == 1
        assert outputs["one"] == outputs["two"]


def test_judge_parser_fixture_agreement() -> None:
    with criterion("judge parser fixture agreement", 1.0):
        parsers = {
            "human_likeness": parse_human_likeness,
            "gsb": parse_gsb,
            "risk": parse_risk,
            "multiturn": parse_multiturn,
            "hallucination": parse_hallucination,
            "thought_mining": parse_thought,
        }
        fixture = json.loads((DATA / "judge_cases_60.json").read_text(encoding="utf-8"))
        assert len(fixture) == 60
        agreements = 0
        for case in fixture:
            parser = parsers[case["judge"]]
            if case["expected"] is None:
                with pytest.raises(ParseFailure):
                    parser(case["completion"])
                agreements += 1
                continue
            verdict = parser(case["completion"])
            fields: dict = {}
            if hasattr(verdict, "trace"):
                fields = {
                    "reasoning_process": verdict.trace.reasoning_process,
                    "response_strategy": verdict.trace.response_strategy,
                }
            else:
                for name in ("score", "risky", "passes", "reason"):
                    if hasattr(verdict, name):
                        fields[name] = getattr(verdict, name)
                if hasattr(verdict, "value"):
                    fields["value"] = verdict.value.value
                if hasattr(verdict, "label"):
                    fields["label"] = verdict.label.value
            for key, expected in case["expected"].items():
                assert fields[key] == expected
            agreements += 1
        assert agreements == 60  # 100% agreement
