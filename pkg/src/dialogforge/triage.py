"""Hallucination triage: detector/verifier/human routing with an audited case store."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .core import DialogueContext, dialogue_from_payload, dialogue_to_payload
from .gateway import EndpointProfile, GatewayError
from .judges import (
    HallucinationLabel,
    HallucinationVerdict,
    JudgeSuite,
    ParseFailure,
)

logger = logging.getLogger(__name__)


class WrongState(Exception):
    """The case is not in the state the operation requires."""


class MissingReason(ValueError):
    """A hallucination confirmation was submitted without a reason."""


class StoreLocked(Exception):
    """Another process holds the case store."""


class TriageState(str, Enum):
    DETECTED = "detected"
    AWAITING_VERIFIER = "awaiting_verifier"
    SIMPLE_NON_HALLUC = "simple_non_halluc"
    AWAITING_HUMAN = "awaiting_human"
    VERIFIED_HALLUC = "verified_halluc"
    HARD_NON_HALLUC = "hard_non_halluc"
    REASON_OPTIMIZED = "reason_optimized"


TERMINAL_STATES = frozenset(
    {TriageState.SIMPLE_NON_HALLUC, TriageState.HARD_NON_HALLUC, TriageState.REASON_OPTIMIZED}
)

LEGAL_TRANSITIONS: dict[TriageState, frozenset[TriageState]] = {
    TriageState.DETECTED: frozenset({TriageState.AWAITING_VERIFIER, TriageState.AWAITING_HUMAN}),
    TriageState.AWAITING_VERIFIER: frozenset(
        {TriageState.SIMPLE_NON_HALLUC, TriageState.AWAITING_HUMAN}
    ),
    TriageState.AWAITING_HUMAN: frozenset(
        {TriageState.VERIFIED_HALLUC, TriageState.HARD_NON_HALLUC}
    ),
    TriageState.VERIFIED_HALLUC: frozenset({TriageState.REASON_OPTIMIZED}),
}


@dataclass(frozen=True)
class HumanVerdict:
    is_hallucination: bool
    reason: str
    annotator_id: str


@dataclass(frozen=True)
class TriageCase:
    """One response moving through the triage routing toward a corpus label."""

    case_id: str
    dialogue: DialogueContext
    response: str
    state: TriageState
    detector_verdict: HallucinationVerdict | None = None
    verifier_verdict: HallucinationVerdict | None = None
    human_verdict: HumanVerdict | None = None
    optimized_reason: str | None = None
    priority: bool = False
    seq: int = 0

    @property
    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def hallucination_type(self) -> HallucinationLabel | None:
        """The flagged type: the detector's when it flagged, else the verifier's."""
        for verdict in (self.detector_verdict, self.verifier_verdict):
            if verdict is not None and verdict.label is not HallucinationLabel.NO_HALLUCINATION:
                return verdict.label
        return None


@dataclass(frozen=True)
class Lease:
    session: str
    expires_at: float


def _verdict_payload(verdict: HallucinationVerdict | None) -> dict | None:
    if verdict is None:
        return None
    return {"label": verdict.label.value, "reason": verdict.reason}


def _verdict_from_payload(payload: dict | None) -> HallucinationVerdict | None:
    if payload is None:
        return None
    return HallucinationVerdict(label=HallucinationLabel(payload["label"]), reason=payload["reason"])


class CaseStore:
    """Single-writer case store persisted as a write-ahead audit log.

    Every mutation appends exactly one JSON line to ``audit.jsonl`` before the
    in-memory state changes; replaying the log reconstructs every case.
    ``compact()`` folds the log into ``snapshot.json``. A lock file guards
    against a second writer. ``path=None`` keeps everything in memory.
    """

    def __init__(self, path: str | Path | None, clock: Callable[[], float] = time.monotonic) -> None:
        self._path = Path(path) if path is not None else None
        self._clock = clock
        self._mutex = threading.Lock()
        self._cases: dict[str, TriageCase] = {}
        self._leases: dict[str, Lease] = {}
        self._seq = 0
        self._audit_handle = None
        self._lock_path: Path | None = None
        if self._path is not None:
            self._path.mkdir(parents=True, exist_ok=True)
            self._acquire_lock()
            self._load()
            self._audit_handle = open(self._path / "audit.jsonl", "a", encoding="utf-8")

    # -- lifecycle ----------------------------------------------------------

    def _acquire_lock(self) -> None:
        assert self._path is not None
        lock_path = self._path / "lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid_text = lock_path.read_text().strip() or "0"
            try:
                os.kill(int(pid_text), 0)
            except (ProcessLookupError, ValueError):
                lock_path.unlink()
                fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except PermissionError:
                raise StoreLocked(f"store at {self._path} is held by pid {pid_text}")
            else:
                raise StoreLocked(f"store at {self._path} is held by pid {pid_text}")
        with os.fdopen(fd, "w") as handle:
            handle.write(str(os.getpid()))
        self._lock_path = lock_path

    def close(self) -> None:
        if self._audit_handle is not None:
            self._audit_handle.close()
            self._audit_handle = None
        if self._lock_path is not None and self._lock_path.exists():
            self._lock_path.unlink()
            self._lock_path = None

    def __enter__(self) -> "CaseStore":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    # -- persistence --------------------------------------------------------

    def _load(self) -> None:
        assert self._path is not None
        snapshot_path = self._path / "snapshot.json"
        if snapshot_path.exists():
            snapshot = json.loads(snapshot_path.read_text(encoding="utf-8"))
            self._seq = snapshot["last_seq"]
            for payload in snapshot["cases"]:
                case = self._case_from_snapshot(payload)
                self._cases[case.case_id] = case
        audit_path = self._path / "audit.jsonl"
        if audit_path.exists():
            with open(audit_path, encoding="utf-8") as handle:
                for line in handle:
                    line = line.strip()
                    if line:
                        self._apply_event(json.loads(line))

    def _apply_event(self, event: dict) -> None:
        """Replay one audit record into the in-memory state."""
        self._seq = max(self._seq, event["seq"])
        if event["event"] == "case_created":
            if event["case_id"] in self._cases:
                return
            data = event["data"]
            case = TriageCase(
                case_id=event["case_id"],
                dialogue=dialogue_from_payload(data["dialogue"]),
                response=data["response"],
                state=TriageState(event["to"]),
                detector_verdict=_verdict_from_payload(data.get("detector_verdict")),
                priority=data.get("priority", False),
                seq=event["seq"],
            )
            self._cases[case.case_id] = case
            return
        case = self._cases[event["case_id"]]
        if case.state.value != event["from"]:
            return  # already applied via snapshot
        data = event.get("data", {})
        updates: dict = {"state": TriageState(event["to"])}
        if "verifier_verdict" in data:
            updates["verifier_verdict"] = _verdict_from_payload(data["verifier_verdict"])
        if "human_verdict" in data and data["human_verdict"] is not None:
            hv = data["human_verdict"]
            updates["human_verdict"] = HumanVerdict(
                is_hallucination=hv["is_hallucination"],
                reason=hv["reason"],
                annotator_id=hv["annotator_id"],
            )
        if "optimized_reason" in data:
            updates["optimized_reason"] = data["optimized_reason"]
        self._cases[event["case_id"]] = replace(case, **updates)

    def _append_audit(self, event: dict) -> None:
        if self._audit_handle is not None:
            self._audit_handle.write(json.dumps(event, ensure_ascii=False) + "\n")
            self._audit_handle.flush()

    def _case_from_snapshot(self, payload: dict) -> TriageCase:
        human = payload.get("human_verdict")
        return TriageCase(
            case_id=payload["case_id"],
            dialogue=dialogue_from_payload(payload["dialogue"]),
            response=payload["response"],
            state=TriageState(payload["state"]),
            detector_verdict=_verdict_from_payload(payload.get("detector_verdict")),
            verifier_verdict=_verdict_from_payload(payload.get("verifier_verdict")),
            human_verdict=HumanVerdict(**human) if human else None,
            optimized_reason=payload.get("optimized_reason"),
            priority=payload.get("priority", False),
            seq=payload.get("seq", 0),
        )

    def _case_to_snapshot(self, case: TriageCase) -> dict:
        return {
            "case_id": case.case_id,
            "dialogue": dialogue_to_payload(case.dialogue),
            "response": case.response,
            "state": case.state.value,
            "detector_verdict": _verdict_payload(case.detector_verdict),
            "verifier_verdict": _verdict_payload(case.verifier_verdict),
            "human_verdict": (
                {
                    "is_hallucination": case.human_verdict.is_hallucination,
                    "reason": case.human_verdict.reason,
                    "annotator_id": case.human_verdict.annotator_id,
                }
                if case.human_verdict
                else None
            ),
            "optimized_reason": case.optimized_reason,
            "priority": case.priority,
            "seq": case.seq,
        }

    def compact(self) -> None:
        """Fold the audit log into the snapshot file and truncate the log."""
        if self._path is None:
            return
        with self._mutex:
            snapshot = {
                "last_seq": self._seq,
                "cases": [self._case_to_snapshot(c) for c in self._cases.values()],
            }
            (self._path / "snapshot.json").write_text(
                json.dumps(snapshot, ensure_ascii=False), encoding="utf-8"
            )
            assert self._audit_handle is not None
            self._audit_handle.close()
            self._audit_handle = open(self._path / "audit.jsonl", "w", encoding="utf-8")

    # -- mutations (single-writer; every mutation emits one audit record) ----

    def create_case(
        self,
        case_id: str,
        dialogue: DialogueContext,
        response: str,
        state: TriageState,
        detector_verdict: HallucinationVerdict | None,
        priority: bool = False,
    ) -> TriageCase:
        with self._mutex:
            if case_id in self._cases:
                raise WrongState(f"case {case_id} already exists")
            self._seq += 1
            case = TriageCase(
                case_id=case_id,
                dialogue=dialogue,
                response=response,
                state=state,
                detector_verdict=detector_verdict,
                priority=priority,
                seq=self._seq,
            )
            self._append_audit(
                {
                    "seq": self._seq,
                    "ts": datetime.now(timezone.utc).isoformat(),
                    "case_id": case_id,
                    "event": "case_created",
                    "from": None,
                    "to": state.value,
                    "data": {
                        "dialogue": dialogue_to_payload(dialogue),
                        "response": response,
                        "detector_verdict": _verdict_payload(detector_verdict),
                        "priority": priority,
                    },
                }
            )
            self._cases[case_id] = case
            return case

    def transition(self, case_id: str, expected_from: TriageState, to_state: TriageState, **updates) -> TriageCase:
        with self._mutex:
            case = self._cases.get(case_id)
            if case is None:
                raise KeyError(f"unknown case {case_id}")
            if case.state is not expected_from:
                raise WrongState(
                    f"case {case_id} is {case.state.value}, not {expected_from.value}"
                )
            if to_state not in LEGAL_TRANSITIONS.get(case.state, frozenset()):
                raise WrongState(
                    f"illegal transition {case.state.value} -> {to_state.value}"
                )
            data: dict = {}
            if "verifier_verdict" in updates:
                data["verifier_verdict"] = _verdict_payload(updates["verifier_verdict"])
            if "human_verdict" in updates and updates["human_verdict"] is not None:
                hv: HumanVerdict = updates["human_verdict"]
                data["human_verdict"] = {
                    "is_hallucination": hv.is_hallucination,
                    "reason": hv.reason,
                    "annotator_id": hv.annotator_id,
                }
            if "optimized_reason" in updates:
                data["optimized_reason"] = updates["optimized_reason"]
            self._seq += 1
            self._append_audit(
                {
                    "seq": self._seq,
                    "ts": datetime.now(timezone.utc).isoformat(),
                    "case_id": case_id,
                    "event": "transition",
                    "from": case.state.value,
                    "to": to_state.value,
                    "data": data,
                }
            )
            new_case = replace(case, state=to_state, **updates)
            self._cases[case_id] = new_case
            self._leases.pop(case_id, None)
            return new_case

    # -- reads and the annotation queue --------------------------------------

    def now(self) -> float:
        return self._clock()

    def get(self, case_id: str) -> TriageCase:
        with self._mutex:
            case = self._cases.get(case_id)
            if case is None:
                raise KeyError(f"unknown case {case_id}")
            return case

    def cases(self) -> list[TriageCase]:
        with self._mutex:
            return list(self._cases.values())

    def state_counts(self) -> dict[str, int]:
        counts = {state.value: 0 for state in TriageState}
        with self._mutex:
            for case in self._cases.values():
                counts[case.state.value] += 1
        return counts

    def _expire_leases(self) -> None:
        now = self._clock()
        expired = [cid for cid, lease in self._leases.items() if lease.expires_at <= now]
        for cid in expired:
            del self._leases[cid]

    def lease_next(self, session: str, ttl_s: float) -> tuple[TriageCase, float] | None:
        """Lease the next reviewable case: priority cases first, then FIFO."""
        with self._mutex:
            self._expire_leases()
            waiting = [
                case
                for case in self._cases.values()
                if case.state is TriageState.AWAITING_HUMAN and case.case_id not in self._leases
            ]
            if not waiting:
                return None
            waiting.sort(key=lambda c: (not c.priority, c.seq))
            case = waiting[0]
            expires_at = self._clock() + ttl_s
            self._leases[case.case_id] = Lease(session=session, expires_at=expires_at)
            return case, expires_at

    def lease_of(self, case_id: str) -> Lease | None:
        with self._mutex:
            self._expire_leases()
            return self._leases.get(case_id)

    def active_leases(self) -> int:
        with self._mutex:
            self._expire_leases()
            return len(self._leases)


class TriageEngine:
    """Runs the detector/verifier/optimizer legs of the triage flow."""

    def __init__(
        self,
        store: CaseStore,
        judges: JudgeSuite,
        detector: EndpointProfile | None = None,
        verifiers: Sequence[EndpointProfile] = (),
        optimizer: EndpointProfile | None = None,
    ) -> None:
        self.store = store
        self._judges = judges
        self._detector = detector
        self._verifiers = tuple(verifiers)
        self._optimizer = optimizer
        self.rewards_scored = 0

    def _require_detector(self) -> EndpointProfile:
        if self._detector is None:
            raise ValueError("no hallucination detector endpoint configured")
        return self._detector

    def detect(self, dialogue: DialogueContext, response: str, case_id: str) -> TriageCase:
        """Create a case and route it on the detector verdict.

        A detector ParseFailure quarantines the case in the detected state for
        manual retry.
        """
        if not response:
            raise ValueError("response must be non-empty")
        detector = self._require_detector()
        try:
            verdict = self._judges.judge_hallucination_text(dialogue, response, detector)
        except ParseFailure:
            logger.warning("detector output unparseable; case %s quarantined", case_id)
            return self.store.create_case(
                case_id, dialogue, response, TriageState.DETECTED, detector_verdict=None
            )
        if verdict.label is HallucinationLabel.NO_HALLUCINATION:
            state = TriageState.AWAITING_VERIFIER
        else:
            state = TriageState.AWAITING_HUMAN
        priority = verdict.label is HallucinationLabel.USER_FEEDBACK_HALLUCINATION
        case = self.store.create_case(
            case_id, dialogue, response, TriageState.DETECTED, detector_verdict=verdict,
            priority=priority,
        )
        return self.store.transition(case_id, TriageState.DETECTED, state)

    def verify(self, case_id: str) -> TriageCase:
        """Confirm a detector-cleared case with every verifier endpoint.

        Unanimous clearance marks the sample simple non-hallucinatory; any
        disagreement or unparseable verifier routes it to human review.
        """
        case = self.store.get(case_id)
        if case.state is not TriageState.AWAITING_VERIFIER:
            raise WrongState(f"case {case_id} is {case.state.value}, not awaiting_verifier")
        if not self._verifiers:
            raise ValueError("no verifier endpoints configured")
        verdicts: list[HallucinationVerdict] = []
        for verifier in self._verifiers:
            try:
                verdicts.append(
                    self._judges.judge_hallucination_text(case.dialogue, case.response, verifier)
                )
            except ParseFailure:
                logger.warning("verifier %s unparseable for case %s; escalating", verifier.name, case_id)
                return self.store.transition(
                    case_id, TriageState.AWAITING_VERIFIER, TriageState.AWAITING_HUMAN,
                    verifier_verdict=None,
                )
        flagged = next(
            (v for v in verdicts if v.label is not HallucinationLabel.NO_HALLUCINATION), None
        )
        if flagged is None:
            return self.store.transition(
                case_id, TriageState.AWAITING_VERIFIER, TriageState.SIMPLE_NON_HALLUC,
                verifier_verdict=verdicts[0],
            )
        return self.store.transition(
            case_id, TriageState.AWAITING_VERIFIER, TriageState.AWAITING_HUMAN,
            verifier_verdict=flagged,
        )

    def submit_human_verdict(
        self, case_id: str, is_hallucination: bool, reason: str, annotator_id: str
    ) -> TriageCase:
        case = self.store.get(case_id)
        if case.state is not TriageState.AWAITING_HUMAN:
            raise WrongState(f"case {case_id} is {case.state.value}, not awaiting_human")
        if is_hallucination and not reason.strip():
            raise MissingReason("confirming a hallucination requires a reason")
        verdict = HumanVerdict(
            is_hallucination=is_hallucination, reason=reason.strip(), annotator_id=annotator_id
        )
        target = TriageState.VERIFIED_HALLUC if is_hallucination else TriageState.HARD_NON_HALLUC
        return self.store.transition(
            case_id, TriageState.AWAITING_HUMAN, target, human_verdict=verdict
        )

    def optimize_reason(self, case_id: str) -> TriageCase:
        """Polish the human rationale; fall back to the raw reason on any failure."""
        case = self.store.get(case_id)
        if case.state is not TriageState.VERIFIED_HALLUC:
            raise WrongState(f"case {case_id} is {case.state.value}, not verified_halluc")
        assert case.human_verdict is not None
        optimized = case.human_verdict.reason
        if self._optimizer is not None:
            try:
                text = self._judges.optimize_reason_text(
                    case.dialogue, case.response, case.human_verdict.reason, self._optimizer
                )
                if text.strip():
                    optimized = text.strip()
            except (GatewayError, ParseFailure):
                logger.warning("reason optimization failed for case %s; keeping human reason", case_id)
        return self.store.transition(
            case_id, TriageState.VERIFIED_HALLUC, TriageState.REASON_OPTIMIZED,
            optimized_reason=optimized,
        )

    def hallucination_reward(self, dialogue: DialogueContext, response: str) -> int:
        """-1 when the detector flags the response, 0 otherwise.

        An unparseable detector counts as 0 so one bad completion cannot
        poison a whole rollout group.
        """
        self.rewards_scored += 1
        try:
            verdict = self._judges.judge_hallucination_text(dialogue, response, self._require_detector())
        except ParseFailure:
            logger.warning("hallucination detector unparseable; treating reward as 0")
            return 0
        return -1 if verdict.label is not HallucinationLabel.NO_HALLUCINATION else 0


_CORPUS_LABELS = {
    TriageState.SIMPLE_NON_HALLUC: "simple_non_hallucination",
    TriageState.HARD_NON_HALLUC: "hard_non_hallucination",
    TriageState.REASON_OPTIMIZED: "hallucination",
}


def emit_curated_corpus(cases: Iterable[TriageCase], sink: str | Path) -> dict[str, int]:
    """Write terminal cases as curated JSON Lines; returns per-label counts.

    Non-terminal cases are excluded with a warning. Output is ordered by
    case_id so re-runs over the same store are byte-identical.
    """
    counts = {label: 0 for label in _CORPUS_LABELS.values()}
    rows = []
    for case in sorted(cases, key=lambda c: c.case_id):
        if not case.is_terminal:
            logger.warning("case %s is non-terminal (%s); excluded", case.case_id, case.state.value)
            continue
        label = _CORPUS_LABELS[case.state]
        row: dict = {"case_id": case.case_id, "label": label, "rationale": ""}
        if case.state is TriageState.REASON_OPTIMIZED:
            halluc_type = case.hallucination_type()
            row["hallucination_type"] = halluc_type.value if halluc_type else None
            row["rationale"] = case.optimized_reason or ""
            if not row["rationale"]:
                raise ValueError(f"hallucinated case {case.case_id} has no rationale")
        rows.append(row)
        counts[label] += 1
    with open(sink, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return counts
