"""Offline metrics over evaluation sets and model comparison reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .core import DialogueContext, LengthFn, dialogue_from_payload, scalar_length
from .gateway import EndpointProfile, GatewayError
from .judges import (
    GsbLabel,
    GsbVerdict,
    HallucinationLabel,
    HallucinationVerdict,
    HumanLikenessVerdict,
    JudgeSuite,
    ParseFailure,
    RiskVerdict,
)

logger = logging.getLogger(__name__)


class EmptySample(ValueError):
    """A metric was asked to aggregate zero records."""


def gsb_score(n_good: int, n_same: int, n_bad: int) -> float:
    """Net preference rate: (good - bad) / total."""
    if min(n_good, n_same, n_bad) < 0:
        raise ValueError("counts must be non-negative")
    total = n_good + n_same + n_bad
    if total == 0:
        raise EmptySample("comparison score needs at least one sample")
    return (n_good - n_bad) / total


@dataclass(frozen=True)
class EvalRecord:
    """One judged response; the comparison verdict exists only with a reference."""

    dialogue: DialogueContext
    response: str
    human: HumanLikenessVerdict
    risk: RiskVerdict
    halluc: HallucinationVerdict
    gsb: GsbVerdict | None = None
    reference: str | None = None
    cot: str = ""

    def __post_init__(self) -> None:
        if self.gsb is not None and self.reference is None:
            raise ValueError("a comparison verdict requires a reference response")


@dataclass(frozen=True)
class EvalReport:
    n: int
    mean_human_likeness: float
    score_histogram: dict[int, int]
    gsb_score: float | None
    risk_rate: float
    hallucination_rate: float
    cot_length_mean: float
    response_length_mean: float

    def __post_init__(self) -> None:
        if sum(self.score_histogram.values()) != self.n:
            raise ValueError("histogram must sum to the sample count")
        for rate in (self.risk_rate, self.hallucination_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0, 1]")

    def to_payload(self) -> dict:
        return {
            "n": self.n,
            "mean_human_likeness": self.mean_human_likeness,
            "score_histogram": {str(k): v for k, v in sorted(self.score_histogram.items())},
            "gsb_score": self.gsb_score,
            "risk_rate": self.risk_rate,
            "hallucination_rate": self.hallucination_rate,
            "cot_length_mean": self.cot_length_mean,
            "response_length_mean": self.response_length_mean,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "EvalReport":
        return cls(
            n=payload["n"],
            mean_human_likeness=payload["mean_human_likeness"],
            score_histogram={int(k): v for k, v in payload["score_histogram"].items()},
            gsb_score=payload["gsb_score"],
            risk_rate=payload["risk_rate"],
            hallucination_rate=payload["hallucination_rate"],
            cot_length_mean=payload["cot_length_mean"],
            response_length_mean=payload["response_length_mean"],
        )


def evaluate_set(records: Iterable[EvalRecord], length_fn: LengthFn = scalar_length) -> EvalReport:
    """Aggregate every offline metric over a judged evaluation set."""
    items = list(records)
    if not items:
        raise EmptySample("evaluation needs at least one record")
    histogram = {score: 0 for score in (1, 2, 3, 4, 5)}
    n_good = n_same = n_bad = 0
    risky = 0
    hallucinated = 0
    cot_total = 0
    response_total = 0
    for record in items:
        histogram[record.human.score] += 1
        if record.gsb is not None:
            if record.gsb.value is GsbLabel.GOOD:
                n_good += 1
            elif record.gsb.value is GsbLabel.SAME:
                n_same += 1
            else:
                n_bad += 1
        if record.risk.risky:
            risky += 1
        if record.halluc.label is not HallucinationLabel.NO_HALLUCINATION:
            hallucinated += 1
        cot_total += length_fn(record.cot)
        response_total += length_fn(record.response)
    n = len(items)
    compared = n_good + n_same + n_bad
    return EvalReport(
        n=n,
        mean_human_likeness=sum(r.human.score for r in items) / n,
        score_histogram=histogram,
        gsb_score=gsb_score(n_good, n_same, n_bad) if compared else None,
        risk_rate=risky / n,
        hallucination_rate=hallucinated / n,
        cot_length_mean=cot_total / n,
        response_length_mean=response_total / n,
    )


_METRICS: tuple[tuple[str, str, bool], ...] = (
    # (attribute, display name, higher is better)
    ("cot_length_mean", "CoT Length", False),
    ("response_length_mean", "Response Length", False),
    ("mean_human_likeness", "Human-Likeness Score", True),
    ("gsb_score", "Dialogue GSB Score", True),
    ("risk_rate", "Critical Business Risk Rate", False),
    ("hallucination_rate", "Hallucination Rate", False),
)


@dataclass(frozen=True)
class MetricDelta:
    metric: str
    value_a: float | None
    value_b: float | None
    delta: float | None
    higher_is_better: bool

    @property
    def improved(self) -> bool | None:
        if self.delta is None or self.delta == 0:
            return None if self.delta is None else False
        return (self.delta > 0) == self.higher_is_better

    def rendered_delta(self) -> str:
        if self.delta is None:
            return "-"
        arrow = "↑" if self.higher_is_better else "↓"
        return f"{self.delta:+.4g}{arrow}"


def compare_models(report_a: EvalReport, report_b: EvalReport) -> list[MetricDelta]:
    """Per-metric deltas of report_b against report_a."""
    deltas = []
    for attribute, name, higher_better in _METRICS:
        value_a = getattr(report_a, attribute)
        value_b = getattr(report_b, attribute)
        delta = None if value_a is None or value_b is None else value_b - value_a
        deltas.append(
            MetricDelta(
                metric=name,
                value_a=value_a,
                value_b=value_b,
                delta=delta,
                higher_is_better=higher_better,
            )
        )
    return deltas


def render_report_table(report: EvalReport) -> str:
    def fmt(value: float | None, percent: bool = False) -> str:
        if value is None:
            return "-"
        return f"{value * 100:.1f}%" if percent else f"{value:.2f}"

    lines = [
        f"{'Metric':<30}{'Value':>12}",
        "-" * 42,
        f"{'Samples':<30}{report.n:>12}",
        f"{'CoT Length':<30}{fmt(report.cot_length_mean):>12}",
        f"{'Response Length':<30}{fmt(report.response_length_mean):>12}",
        f"{'Human-Likeness Score':<30}{fmt(report.mean_human_likeness):>12}",
        f"{'Dialogue GSB Score':<30}{fmt(report.gsb_score, percent=True):>12}",
        f"{'Critical Business Risk Rate':<30}{fmt(report.risk_rate, percent=True):>12}",
        f"{'Hallucination Rate':<30}{fmt(report.hallucination_rate, percent=True):>12}",
        f"{'Score Histogram 1..5':<30}"
        + str([report.score_histogram[s] for s in (1, 2, 3, 4, 5)]).rjust(12),
    ]
    return "\n".join(lines)


def render_comparison_table(deltas: Sequence[MetricDelta]) -> str:
    lines = [f"{'Metric':<30}{'A':>10}{'B':>10}{'Delta':>12}", "-" * 62]
    for item in deltas:
        val_a = "-" if item.value_a is None else f"{item.value_a:.4g}"
        val_b = "-" if item.value_b is None else f"{item.value_b:.4g}"
        lines.append(f"{item.metric:<30}{val_a:>10}{val_b:>10}{item.rendered_delta():>12}")
    return "\n".join(lines)


@dataclass(frozen=True)
class JudgedEvaluation:
    records: tuple[EvalRecord, ...]
    judge_failures: int
    attempted: int

    @property
    def failure_rate(self) -> float:
        return self.judge_failures / self.attempted if self.attempted else 0.0


def load_eval_inputs(
    path: str | Path, length_fn: LengthFn = scalar_length
) -> Iterator[tuple[DialogueContext, str, str]]:
    """Read an evaluation JSONL file of dialogue fields plus response (and cot)."""
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            dialogue = dialogue_from_payload(payload, length_fn=length_fn)
            yield dialogue, payload["response"], payload.get("cot", "")


def run_judged_evaluation(
    inputs: Iterable[tuple[DialogueContext, str, str]],
    judges: JudgeSuite,
    human_judge: EndpointProfile,
    gsb_judge: EndpointProfile,
    risk_judge: EndpointProfile,
    halluc_judge: EndpointProfile,
) -> JudgedEvaluation:
    """Judge each (dialogue, response) and collect evaluation records.

    Records whose judges hard-fail (unparseable after the re-ask, or endpoint
    errors) are dropped and counted so the caller can enforce a failure-rate
    threshold.
    """
    records: list[EvalRecord] = []
    failures = 0
    attempted = 0
    for dialogue, response, cot in inputs:
        attempted += 1
        try:
            human = judges.judge_human_likeness_text(dialogue, response, human_judge)
            risk = judges.judge_risk_text(dialogue, response, risk_judge)
            halluc = judges.judge_hallucination_text(dialogue, response, halluc_judge)
            gsb: GsbVerdict | None = None
            if dialogue.reference_response:
                gsb = judges.judge_gsb_text(
                    dialogue, response, dialogue.reference_response, gsb_judge
                )
        except (ParseFailure, GatewayError) as exc:
            failures += 1
            logger.warning("judging failed for %s: %s", dialogue.dialogue_id, exc)
            continue
        records.append(
            EvalRecord(
                dialogue=dialogue,
                response=response,
                cot=cot,
                reference=dialogue.reference_response,
                human=human,
                risk=risk,
                halluc=halluc,
                gsb=gsb,
            )
        )
    return JudgedEvaluation(records=tuple(records), judge_failures=failures, attempted=attempted)
