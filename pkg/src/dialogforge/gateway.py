"""Uniform client for chat-completion endpoints, with a deterministic stub backend."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    """Base class for endpoint failures."""


class GatewayTimeout(GatewayError):
    """The endpoint did not answer within the configured timeout."""


class RateLimited(GatewayError):
    """The endpoint kept answering 429 past the retry budget."""


class MalformedResponse(GatewayError):
    """The endpoint answered with a body the client cannot interpret."""


@dataclass(frozen=True)
class EndpointProfile:
    """Connection and sampling settings for one generation or judging endpoint.

    A ``stub`` URL scheme routes requests to the in-process scripted backend
    instead of the network.
    """

    name: str
    base_url: str
    model_id: str
    api_key_env: str = ""
    max_parallel: int = 4
    timeout: float = 30.0
    temperature: float = 1.0
    top_p: float = 0.95
    supports_batch_n: bool = True
    max_retries: int = 3
    backoff_base: float = 0.5

    def __post_init__(self) -> None:
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    @property
    def is_stub(self) -> bool:
        return self.base_url.startswith("stub:")


def fingerprint(prompt: str) -> str:
    """Stable request fingerprint: sha256 of the prompt text."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class StubRule:
    """A canned completion selected when every substring occurs in the prompt
    (and, when set, the request goes to the named endpoint)."""

    contains: tuple[str, ...]
    completion: str | Sequence[str]
    endpoint: str | None = None

    def matches(self, prompt: str, endpoint: str) -> bool:
        if self.endpoint is not None and self.endpoint != endpoint:
            return False
        return all(needle in prompt for needle in self.contains)


@dataclass(frozen=True)
class StubScript:
    """Canned completions for the stub backend.

    Lookup order per request: exact fingerprint of the prompt, then the first
    matching rule, then the default. A list value yields completion i for
    slot i (cycled), so one fingerprint always produces the same sequence.
    """

    responses: Mapping[str, str | Sequence[str]] = field(default_factory=dict)
    rules: tuple[StubRule, ...] = ()
    default_completion: str = ""

    def lookup(self, prompt: str, slot: int, endpoint: str = "") -> str:
        value: str | Sequence[str] | None = self.responses.get(fingerprint(prompt))
        if value is None:
            for rule in self.rules:
                if rule.matches(prompt, endpoint):
                    value = rule.completion
                    break
        if value is None:
            value = self.default_completion
        if isinstance(value, str):
            return value
        return value[slot % len(value)]

    @classmethod
    def from_payload(cls, payload: dict) -> "StubScript":
        rules = tuple(
            StubRule(
                contains=tuple(item["contains"]),
                completion=item["completion"],
                endpoint=item.get("endpoint"),
            )
            for item in payload.get("rules", [])
        )
        return cls(
            responses=dict(payload.get("responses", {})),
            rules=rules,
            default_completion=payload.get("default_completion", ""),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "StubScript":
        with open(path, encoding="utf-8") as handle:
            return cls.from_payload(json.load(handle))


@dataclass(frozen=True)
class Completion:
    """One completion with audit metadata."""

    text: str
    endpoint: str
    latency_s: float


class Gateway:
    """Dispatches completion requests with bounded parallelism and retry.

    Retries exponentially on timeouts and 429s up to the profile's budget;
    malformed bodies surface immediately. At most ``max_parallel`` requests
    are in flight per endpoint, and completions are returned in request order.
    """

    def __init__(
        self,
        stub_script: StubScript | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self._stub_script = stub_script
        self._transport = transport
        self._sleep = sleep
        self._semaphores: dict[str, threading.Semaphore] = {}
        self._lock = threading.Lock()
        self.stats: dict[str, int] = {"requests": 0, "retries": 0, "stub_calls": 0}

    def _count(self, key: str, amount: int = 1) -> None:
        with self._lock:
            self.stats[key] = self.stats.get(key, 0) + amount

    def _semaphore(self, profile: EndpointProfile) -> threading.Semaphore:
        with self._lock:
            if profile.name not in self._semaphores:
                self._semaphores[profile.name] = threading.Semaphore(profile.max_parallel)
            return self._semaphores[profile.name]

    def complete(self, profile: EndpointProfile, prompt: str, n: int = 1) -> list[Completion]:
        """Return exactly n completions for the prompt, or raise."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if profile.is_stub:
            return self._complete_stub(profile, prompt, n)
        if profile.supports_batch_n:
            return self._request(profile, prompt, n)
        completions: list[Completion] = []
        for _ in range(n):
            completions.extend(self._request(profile, prompt, 1))
        return completions

    def _complete_stub(self, profile: EndpointProfile, prompt: str, n: int) -> list[Completion]:
        if self._stub_script is None:
            raise GatewayError(f"endpoint {profile.name} is a stub but no script is loaded")
        self._count("stub_calls")
        return [
            Completion(
                text=self._stub_script.lookup(prompt, slot, endpoint=profile.name),
                endpoint=profile.name,
                latency_s=0.0,
            )
            for slot in range(n)
        ]

    def _request(self, profile: EndpointProfile, prompt: str, n: int) -> list[Completion]:
        payload = {
            "model": profile.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "n": n,
            "temperature": profile.temperature,
            "top_p": profile.top_p,
        }
        headers = {"Content-Type": "application/json"}
        if profile.api_key_env:
            key = os.environ.get(profile.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        url = profile.base_url.rstrip("/") + "/chat/completions"

        semaphore = self._semaphore(profile)
        attempt = 0
        while True:
            with semaphore:
                self._count("requests")
                started = time.monotonic()
                try:
                    with httpx.Client(transport=self._transport, timeout=profile.timeout) as client:
                        response = client.post(url, json=payload, headers=headers)
                except httpx.TimeoutException as exc:
                    if attempt >= profile.max_retries:
                        raise GatewayTimeout(f"{profile.name}: {exc}") from exc
                    response = None
                latency = time.monotonic() - started

            if response is not None:
                if response.status_code == 429:
                    if attempt >= profile.max_retries:
                        raise RateLimited(f"{profile.name}: rate limited after {attempt} retries")
                elif response.status_code >= 400:
                    raise GatewayError(f"{profile.name}: HTTP {response.status_code}")
                else:
                    return self._parse_completions(profile, response, n, latency)

            attempt += 1
            self._count("retries")
            delay = profile.backoff_base * (2 ** (attempt - 1))
            logger.info("retrying %s (attempt %d) after %.2fs", profile.name, attempt, delay)
            self._sleep(delay)

    def _parse_completions(
        self, profile: EndpointProfile, response: httpx.Response, n: int, latency: float
    ) -> list[Completion]:
        try:
            body = response.json()
            choices = body["choices"]
            texts = [choice["message"]["content"] for choice in choices]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"{profile.name}: {exc}") from exc
        if len(texts) != n or any(not isinstance(t, str) for t in texts):
            raise MalformedResponse(
                f"{profile.name}: expected {n} completions, got {len(texts)}"
            )
        return [Completion(text=t, endpoint=profile.name, latency_s=latency) for t in texts]
