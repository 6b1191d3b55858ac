from __future__ import annotations

import pytest

from dialogforge.core import DialogueContext, KnowledgeSnippet, Role, Turn
from dialogforge.gateway import EndpointProfile, Gateway, StubScript
from dialogforge.judges import JudgeSuite


def make_dialogue(
    dialogue_id: str = "d-001",
    query: str = "Where is my refund?",
    with_csr: bool = True,
    reference: str | None = "Your refund was issued on Friday and lands within 3 days.",
    snippets: tuple[tuple[str, str], ...] = (("kb-1", "Refunds settle within 3 business days."),),
) -> DialogueContext:
    history = [
        Turn(role=Role.USER, text="I returned the headphones last week.", index=0),
    ]
    if with_csr:
        history.append(
            Turn(role=Role.HUMAN_CSR, text="Thanks for waiting! Let me check the return.", index=1)
        )
    return DialogueContext(
        dialogue_id=dialogue_id,
        history=tuple(history),
        query=query,
        snippets=tuple(KnowledgeSnippet(id=sid, content=content) for sid, content in snippets),
        reference_response=reference,
    )


def stub_profile(name: str = "stub-main", **overrides) -> EndpointProfile:
    settings = {
        "name": name,
        "base_url": "stub://local",
        "model_id": "stub-model",
        "max_parallel": 4,
    }
    settings.update(overrides)
    return EndpointProfile(**settings)


ALL_MARKER_COMPLETION = (
    "[Analysis] looks fine\n"
    "[Score] 4\n"
    "[GSB Evaluation Result] Good\n"
    "[Risk Judgment] No\n"
    "[Multi-Turn Judgment] Pass\n"
    "[Judgment Result] No Hallucination\n"
    "[Judgment Reason] None\n"
)


@pytest.fixture
def dialogue() -> DialogueContext:
    return make_dialogue()


@pytest.fixture
def stub_gateway() -> Gateway:
    return Gateway(stub_script=StubScript(default_completion=ALL_MARKER_COMPLETION))


def make_gateway(script: StubScript) -> Gateway:
    return Gateway(stub_script=script)


def make_suite(gateway: Gateway, **kwargs) -> JudgeSuite:
    return JudgeSuite(gateway, **kwargs)
