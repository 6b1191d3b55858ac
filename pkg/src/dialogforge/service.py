"""HTTP service: annotation queue, case lookup, stats, metrics, and the UI bundle."""

from __future__ import annotations

import logging
import os
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .judges import JudgeSuite
from .triage import CaseStore, MissingReason, TriageCase, TriageEngine, TriageState, WrongState

logger = logging.getLogger(__name__)


class VerdictBody(BaseModel):
    is_hallucination: bool
    reason: str = ""
    annotator_id: str = "anonymous"


def _case_view(case: TriageCase, lease_expires_in_s: float | None = None) -> dict:
    detector = case.detector_verdict
    return {
        "case_id": case.case_id,
        "state": case.state.value,
        "priority": case.priority,
        "history": [
            {"role": turn.role.value, "text": turn.text} for turn in case.dialogue.history
        ],
        "query": case.dialogue.query,
        "snippets": [
            {"id": s.id, "content": s.content} for s in case.dialogue.snippets
        ],
        "response": case.response,
        "detector": (
            {"label": detector.label.value, "reason": detector.reason} if detector else None
        ),
        "lease_expires_in_s": lease_expires_in_s,
    }


def create_app(
    store: CaseStore,
    engine: TriageEngine | None = None,
    lease_ttl_s: float = 600.0,
    auth_token: str = "",
    ui_dir: str | Path | None = None,
) -> FastAPI:
    """Build the service. Annotation endpoints require the bearer token when set."""
    app = FastAPI(title="dialogforge triage service")
    metrics = {"leases_granted": 0, "verdicts_accepted": 0, "verdicts_rejected": 0}

    def authorized(request: Request) -> None:
        if not auth_token:
            return
        header = request.headers.get("Authorization", "")
        if header != f"Bearer {auth_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.get("/metrics")
    def get_metrics(_: None = Depends(authorized)) -> dict:
        return {
            "states": store.state_counts(),
            "active_leases": store.active_leases(),
            "rewards_scored": engine.rewards_scored if engine else 0,
            **metrics,
        }

    @app.get("/stats")
    def get_stats(_: None = Depends(authorized)) -> dict:
        counts = store.state_counts()
        return {
            "states": counts,
            "queue_depth": counts[TriageState.AWAITING_HUMAN.value],
            "active_leases": store.active_leases(),
            "terminal": sum(
                counts[state.value]
                for state in (
                    TriageState.SIMPLE_NON_HALLUC,
                    TriageState.HARD_NON_HALLUC,
                    TriageState.REASON_OPTIMIZED,
                )
            ),
        }

    @app.get("/queue/next")
    def queue_next(session: str = "default", _: None = Depends(authorized)) -> Response:
        leased = store.lease_next(session=session, ttl_s=lease_ttl_s)
        if leased is None:
            return Response(status_code=204)
        case, expires_at = leased
        metrics["leases_granted"] += 1
        remaining = max(0.0, expires_at - store.now())
        return JSONResponse(_case_view(case, lease_expires_in_s=remaining))

    @app.post("/queue/{case_id}/verdict")
    def submit_verdict(case_id: str, body: VerdictBody, _: None = Depends(authorized)) -> dict:
        if engine is None:
            raise HTTPException(status_code=503, detail="no triage engine configured")
        try:
            case = engine.submit_human_verdict(
                case_id, body.is_hallucination, body.reason, body.annotator_id
            )
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id}")
        except WrongState as exc:
            metrics["verdicts_rejected"] += 1
            raise HTTPException(status_code=409, detail=str(exc))
        except MissingReason as exc:
            metrics["verdicts_rejected"] += 1
            raise HTTPException(status_code=422, detail=str(exc))
        metrics["verdicts_accepted"] += 1
        return {"case_id": case.case_id, "state": case.state.value}

    @app.get("/cases/{case_id}")
    def get_case(case_id: str, _: None = Depends(authorized)) -> dict:
        try:
            case = store.get(case_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id}")
        lease = store.lease_of(case_id)
        remaining = max(0.0, lease.expires_at - store.now()) if lease else None
        return _case_view(case, lease_expires_in_s=remaining)

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def resolve_auth_token(auth_token_env: str) -> str:
    return os.environ.get(auth_token_env, "") if auth_token_env else ""
