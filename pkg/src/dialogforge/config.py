"""Engine configuration: a single JSON document with env interpolation for secrets."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .core import CotMode, RewardWeights
from .curation import Stage, StageConfig
from .gateway import EndpointProfile, StubScript
from .rewards import RuleSet


class ConfigError(Exception):
    """The configuration file is missing, malformed, or carries unknown keys."""


_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

_TOP_KEYS = {
    "seed", "workers", "bind", "store_path", "ruleset_path", "auth_token_env",
    "lease_ttl_s", "hybrid_ratio", "gsb_swap_mitigation", "halluc_sample_rate",
    "judge_failure_threshold", "weights", "endpoints", "stub", "judges", "stages",
    "ui_dir", "archive_path",
}
_WEIGHT_KEYS = {"alpha1", "alpha2", "alpha3", "beta1", "beta2", "beta3", "gamma", "rho"}
_ENDPOINT_KEYS = {
    "base_url", "model_id", "api_key_env", "max_parallel", "timeout", "temperature",
    "top_p", "supports_batch_n", "max_retries", "backoff_base",
}
_STAGE_KEYS = {
    "stage", "generators", "judges", "n_candidates", "cot_mode", "refine_criteria",
    "hybrid_ratio", "halluc_sample_rate",
}
_STUB_KEYS = {"default_completion", "responses", "rules", "path"}
_JUDGE_ROLES = {
    "human", "gsb", "risk", "multiturn", "hallucination_detector",
    "hallucination_verifiers", "reason_optimizer", "mining",
}


def _interpolate(value):
    if isinstance(value, str):
        def sub(match: re.Match[str]) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, list):
        return [_interpolate(item) for item in value]
    if isinstance(value, dict):
        return {key: _interpolate(item) for key, item in value.items()}
    return value


def _check_keys(obj: dict, allowed: set[str], context: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


@dataclass(frozen=True)
class EngineConfig:
    """Validated engine settings plus the raw-file hash used in run manifests."""

    path: Path
    config_hash: str
    seed: int | None
    workers: int
    bind_host: str
    bind_port: int
    store_path: str | None
    ruleset_path: str | None
    auth_token_env: str
    lease_ttl_s: float
    hybrid_ratio: float
    gsb_swap_mitigation: bool
    halluc_sample_rate: float
    judge_failure_threshold: float
    weights: RewardWeights
    endpoints: dict[str, EndpointProfile]
    stub: StubScript | None
    judges: dict[str, tuple[str, ...]]
    stages: dict[str, dict]
    ui_dir: str | None
    archive_path: str | None

    def profile(self, name: str) -> EndpointProfile:
        try:
            return self.endpoints[name]
        except KeyError:
            raise ConfigError(f"unknown endpoint {name!r}") from None

    def judge_profiles(self) -> dict[str, tuple[EndpointProfile, ...]]:
        return {
            role: tuple(self.profile(name) for name in names)
            for role, names in self.judges.items()
        }

    def ruleset(self) -> RuleSet:
        if self.ruleset_path is None:
            return RuleSet()
        path = Path(self.ruleset_path)
        if not path.is_absolute():
            path = self.path.parent / path
        return RuleSet.from_file(path)

    def stage_config(self, name: str) -> StageConfig:
        try:
            raw = self.stages[name]
        except KeyError:
            raise ConfigError(f"stage {name!r} is not configured") from None
        generator_names = raw.get("generators", [])
        judge_roles = self.judge_profiles()
        stage_judges = {
            role: judge_roles[role]
            for role in ("human", "gsb", "risk", "multiturn", "mining")
            if role in judge_roles
        }
        try:
            return StageConfig(
                stage=Stage(raw["stage"]),
                generator_profiles=tuple(self.profile(n) for n in generator_names),
                judge_profiles=stage_judges,
                n_candidates=raw.get("n_candidates", 8),
                cot_mode=CotMode(raw.get("cot_mode", "pre_cot")),
                refine_criteria=frozenset(raw.get("refine_criteria", [])),
                hybrid_ratio=raw.get("hybrid_ratio", self.hybrid_ratio),
                halluc_sample_rate=raw.get("halluc_sample_rate", self.halluc_sample_rate),
            )
        except ValueError as exc:
            raise ConfigError(f"stage {name!r}: {exc}") from exc


def load_config(path: str | Path) -> EngineConfig:
    """Load, interpolate, and validate an engine config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw_bytes = path.read_bytes()
    config_hash = hashlib.sha256(raw_bytes).hexdigest()
    try:
        document = json.loads(raw_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    document = _interpolate(document)
    _check_keys(document, _TOP_KEYS, str(path))

    weights_raw = document.get("weights", {})
    _check_keys(weights_raw, _WEIGHT_KEYS, "weights")
    try:
        weights = RewardWeights(**weights_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"weights: {exc}") from exc

    endpoints: dict[str, EndpointProfile] = {}
    for name, spec in document.get("endpoints", {}).items():
        _check_keys(spec, _ENDPOINT_KEYS, f"endpoints.{name}")
        try:
            endpoints[name] = EndpointProfile(name=name, **spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"endpoints.{name}: {exc}") from exc

    stub = None
    stub_raw = document.get("stub")
    if stub_raw is not None:
        _check_keys(stub_raw, _STUB_KEYS, "stub")
        if "path" in stub_raw:
            stub_path = Path(stub_raw["path"])
            if not stub_path.is_absolute():
                stub_path = path.parent / stub_path
            stub = StubScript.from_file(stub_path)
        else:
            stub = StubScript.from_payload(stub_raw)

    judges: dict[str, tuple[str, ...]] = {}
    judges_raw = document.get("judges", {})
    _check_keys(judges_raw, _JUDGE_ROLES, "judges")
    for role, names in judges_raw.items():
        names = [names] if isinstance(names, str) else list(names)
        for name in names:
            if name not in endpoints:
                raise ConfigError(f"judges.{role} references unknown endpoint {name!r}")
        judges[role] = tuple(names)

    stages = document.get("stages", {})
    for stage_name, spec in stages.items():
        _check_keys(spec, _STAGE_KEYS, f"stages.{stage_name}")
        if "stage" not in spec:
            raise ConfigError(f"stages.{stage_name}: missing 'stage'")
        for generator in spec.get("generators", []):
            if generator not in endpoints:
                raise ConfigError(
                    f"stages.{stage_name} references unknown endpoint {generator!r}"
                )

    bind = document.get("bind", "127.0.0.1:8321")
    host, _, port_text = bind.partition(":")
    try:
        port = int(port_text or "8321")
    except ValueError as exc:
        raise ConfigError(f"bind address {bind!r} has a bad port") from exc

    return EngineConfig(
        path=path,
        config_hash=config_hash,
        seed=document.get("seed"),
        workers=document.get("workers", 1),
        bind_host=host or "127.0.0.1",
        bind_port=port,
        store_path=document.get("store_path"),
        ruleset_path=document.get("ruleset_path"),
        auth_token_env=document.get("auth_token_env", ""),
        lease_ttl_s=document.get("lease_ttl_s", 600.0),
        hybrid_ratio=document.get("hybrid_ratio", 0.5),
        gsb_swap_mitigation=document.get("gsb_swap_mitigation", False),
        halluc_sample_rate=document.get("halluc_sample_rate", 1.0),
        judge_failure_threshold=document.get("judge_failure_threshold", 0.2),
        weights=weights,
        endpoints=endpoints,
        stub=stub,
        judges=judges,
        stages=stages,
        ui_dir=document.get("ui_dir"),
        archive_path=document.get("archive_path"),
    )
