"""Post-training data curation, reward scoring, and hallucination triage for
retrieval-augmented customer-service dialogue."""

__version__ = "0.1.0"

from .core import (
    CandidatePair,
    CotMode,
    DialogueContext,
    KnowledgeSnippet,
    MalformedStructure,
    Origin,
    RewardWeights,
    Role,
    ThoughtTrace,
    Turn,
    parse_candidate,
    serialize_candidate,
)
from .gateway import Completion, EndpointProfile, Gateway, StubScript
from .judges import (
    GsbLabel,
    GsbVerdict,
    HallucinationLabel,
    HallucinationVerdict,
    HumanLikenessVerdict,
    JudgeSuite,
    MinedThought,
    MultiTurnVerdict,
    ParseFailure,
    RiskVerdict,
)
from .rewards import (
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

__all__ = [
    "CandidatePair",
    "Completion",
    "CotMode",
    "DialogueContext",
    "EndpointProfile",
    "Gateway",
    "GsbLabel",
    "GsbVerdict",
    "HallucinationLabel",
    "HallucinationVerdict",
    "HumanLikenessVerdict",
    "JudgeSuite",
    "KnowledgeSnippet",
    "MalformedStructure",
    "MinedThought",
    "MultiTurnVerdict",
    "Origin",
    "ParseFailure",
    "RewardVector",
    "RewardWeights",
    "RiskVerdict",
    "Role",
    "RolloutGroup",
    "RuleSet",
    "StubScript",
    "ThoughtTrace",
    "Turn",
    "aggregate_reward",
    "compute_format_reward",
    "compute_group_advantages",
    "compute_length_reward",
    "compute_match_reward",
    "normalize_judge_rewards",
    "parse_candidate",
    "serialize_candidate",
]
