"""LLM gateway: the single path every pipeline prompt goes through.

Provides the request model, a scripted deterministic client for tests and
offline runs, an HTTP chat-completion client, retry with exponential
backoff, an on-disk response cache and a bounded-concurrency gateway
combining them.

Wire format of :class:`HttpLlmClient` (``POST {base_url}/chat/completions``)::

    request:  {"model": str, "messages": [{"role": "user", "content": str}],
               "max_tokens": int, "temperature": float}
    response: {"choices": [{"message": {"content": str}}]}

Cache layout: ``<cache_dir>/<sha256>.json`` per response, where the hash
covers (model_tag, temperature, prompt).
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Protocol

import requests
import yaml
from pydantic import BaseModel, ConfigDict, Field
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.config import Config
from app.core.storage import atomic_write_text
from app.logger import logger


class LlmError(Exception):
    """Base class for LLM gateway failures."""


class RetryableLlmError(LlmError):
    """A failure worth retrying."""


class LlmTransportError(RetryableLlmError):
    """Network failure or 5xx response."""


class LlmRateLimitError(RetryableLlmError):
    """429 response."""


class LlmMalformedResponseError(RetryableLlmError):
    """Response body without usable text."""


class AttemptRecord(BaseModel):
    """One failed attempt of a request."""
    attempt: int
    error_type: str
    message: str


class LlmRetryExhaustedError(LlmError):
    """Raised when every attempt allowed by the retry policy failed."""

    def __init__(self, attempts: list[AttemptRecord]):
        self.attempts = attempts
        summary = "; ".join(f"#{a.attempt} {a.error_type}: {a.message}" for a in attempts)
        super().__init__(f"LLM request failed after {len(attempts)} attempts: {summary}")


class LlmRequest(BaseModel):
    """A text-only completion request.

    Attributes:
        prompt: Prompt text (nonempty)
        max_tokens: Completion budget
        temperature: Sampling temperature (>= 0)
        model_tag: Logical model, e.g. "large" or "small"
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    prompt: str = Field(min_length=1)
    max_tokens: int = Field(default=512, ge=1)
    temperature: float = Field(default=0.0, ge=0.0)
    model_tag: str = "large"

    @property
    def prompt_sha256(self) -> str:
        return hashlib.sha256(self.prompt.encode("utf-8")).hexdigest()


class RetryPolicy(BaseModel):
    """Retry budget and exponential backoff (seconds)."""
    max_attempts: int = Field(default=4, ge=1)
    backoff_base: float = Field(default=1.0, ge=0.0)
    backoff_max: float = Field(default=30.0, ge=0.0)


class LlmClient(Protocol):
    """Anything that turns an LlmRequest into text."""

    name: str

    def complete(self, request: LlmRequest) -> str: ...


class ScriptRule(BaseModel):
    """Scripted response for prompts containing a substring."""
    contains: str
    response: str
    model_tag: str | None = None


class ScriptedLlmClient:
    """Deterministic client answering from rules, fixtures or a callback.

    Resolution order: ``responder`` callback, then the first matching rule,
    then fixtures keyed by prompt SHA-256, then ``default``. Every request
    is recorded in ``calls`` for inspection.
    """

    def __init__(
        self,
        responder: Callable[[LlmRequest], str | None] | None = None,
        rules: list[ScriptRule] | None = None,
        fixtures: dict[str, str] | None = None,
        default: str | None = None,
        fail_times: int = 0,
        failure: type[RetryableLlmError] = LlmTransportError,
        name: str = "mock",
    ):
        self.name = name
        self.responder = responder
        self.rules = list(rules or [])
        self.fixtures = dict(fixtures or {})
        self.default = default
        self.fail_times = fail_times
        self.failure = failure
        self.calls: list[LlmRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: LlmRequest) -> str:
        with self._lock:
            self.calls.append(request)
            if self.fail_times > 0:
                self.fail_times -= 1
                raise self.failure(f"scripted failure for prompt {request.prompt_sha256[:12]}")
        if self.responder is not None:
            text = self.responder(request)
            if text is not None:
                return text
        for rule in self.rules:
            if rule.contains in request.prompt and rule.model_tag in (None, request.model_tag):
                return rule.response
        if request.prompt_sha256 in self.fixtures:
            return self.fixtures[request.prompt_sha256]
        if self.default is not None:
            return self.default
        raise LookupError(f"No scripted response for prompt {request.prompt_sha256[:12]} ({request.model_tag})")

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedLlmClient":
        """Load rules/fixtures/default from a YAML or JSON fixture file."""
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls(
            rules=[ScriptRule.model_validate(r) for r in data.get("rules", [])],
            fixtures=data.get("fixtures", {}),
            default=data.get("default"),
            name=data.get("name", "mock"),
        )


class HttpLlmClient:
    """Chat-completion client over HTTP, one requests.Session per thread."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        models: dict[str, str] | None = None,
        timeout: float | None = None,
    ):
        self.base_url = (base_url or Config.LLM_BASE_URL).rstrip("/")
        self.api_key = api_key if api_key is not None else Config.LLM_API_KEY
        self.models = dict(models or {})
        self.timeout = timeout or Config.LLM_TIMEOUT
        self.name = f"http:{self.base_url}"
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            if self.api_key:
                session.headers["Authorization"] = f"Bearer {self.api_key}"
            self._local.session = session
        return session

    def payload(self, request: LlmRequest) -> dict[str, Any]:
        """JSON body sent for ``request``."""
        return {
            "model": self.models.get(request.model_tag, request.model_tag),
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }

    def complete(self, request: LlmRequest) -> str:
        try:
            response = self._session().post(
                f"{self.base_url}/chat/completions",
                json=self.payload(request),
                timeout=self.timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as e:
            raise LlmTransportError(str(e)) from e
        if response.status_code == 429:
            raise LlmRateLimitError(f"rate limited: {response.text[:200]}")
        if response.status_code >= 500:
            raise LlmTransportError(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code >= 400:
            raise LlmError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise LlmMalformedResponseError(f"unexpected response body: {response.text[:200]}") from e
        if not isinstance(content, str):
            raise LlmMalformedResponseError("response content is not text")
        return content


def complete_with_retry(
    client: LlmClient,
    request: LlmRequest,
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Call ``client`` until it succeeds or the policy's budget is spent.

    Args:
        client: LLM client
        request: Request to send
        policy: Attempt budget and backoff
        sleep: Sleep function (injectable for tests)

    Returns:
        Text of the first successful attempt

    Raises:
        LlmRetryExhaustedError: With one AttemptRecord per failed attempt
    """
    attempts: list[AttemptRecord] = []
    retrying = Retrying(
        stop=stop_after_attempt(policy.max_attempts),
        wait=wait_exponential(multiplier=policy.backoff_base, max=policy.backoff_max),
        retry=retry_if_exception_type(RetryableLlmError),
        reraise=True,
        sleep=sleep,
    )
    text = None
    try:
        for attempt in retrying:
            with attempt:
                number = attempt.retry_state.attempt_number
                try:
                    text = client.complete(request)
                except RetryableLlmError as e:
                    attempts.append(AttemptRecord(attempt=number, error_type=type(e).__name__, message=str(e)))
                    logger.warning(f"LLM attempt {number}/{policy.max_attempts} failed ({type(e).__name__}): {e}")
                    raise
    except RetryableLlmError as e:
        raise LlmRetryExhaustedError(attempts) from e
    return text


class ResponseCache:
    """One JSON file per completed response, keyed by (model_tag, temperature, prompt)."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def key(request: LlmRequest) -> str:
        material = json.dumps(
            {"model_tag": request.model_tag, "temperature": request.temperature, "prompt": request.prompt_sha256},
            sort_keys=True,
        )
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def path(self, request: LlmRequest) -> Path:
        return self.cache_dir / f"{self.key(request)}.json"

    def get(self, request: LlmRequest) -> str | None:
        path = self.path(request)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)["response"]

    def put(self, request: LlmRequest, response: str) -> None:
        entry = {
            "model_tag": request.model_tag,
            "temperature": request.temperature,
            "prompt_sha256": request.prompt_sha256,
            "response": response,
        }
        with self._lock:
            atomic_write_text(self.path(request), json.dumps(entry, ensure_ascii=False))


@dataclass
class GatewayStats:
    """Counters of one gateway."""
    requests: int = 0
    cache_hits: int = 0
    client_calls: int = 0
    max_in_flight: int = 0


class LlmGateway:
    """Retrying, caching, concurrency-bounded front of an LlmClient."""

    def __init__(
        self,
        client: LlmClient,
        cache: ResponseCache | None = None,
        policy: RetryPolicy | None = None,
        parallelism: int = 8,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {parallelism}")
        self.client = client
        self.cache = cache
        self.policy = policy or RetryPolicy()
        self.parallelism = parallelism
        self.sleep = sleep
        self.stats = GatewayStats()
        self._slots = threading.BoundedSemaphore(parallelism)
        self._lock = threading.Lock()
        self._in_flight = 0

    @property
    def name(self) -> str:
        return self.client.name

    def complete(self, request: LlmRequest) -> str:
        """Cached, retried completion of one request."""
        with self._lock:
            self.stats.requests += 1
        if self.cache is not None:
            cached = self.cache.get(request)
            if cached is not None:
                with self._lock:
                    self.stats.cache_hits += 1
                return cached
        with self._slots:
            with self._lock:
                self._in_flight += 1
                self.stats.client_calls += 1
                self.stats.max_in_flight = max(self.stats.max_in_flight, self._in_flight)
            try:
                text = complete_with_retry(self.client, request, self.policy, self.sleep)
            finally:
                with self._lock:
                    self._in_flight -= 1
        if self.cache is not None:
            self.cache.put(request, text)
        return text

    def ask(self, prompt: str, model_tag: str = "large", temperature: float = 0.0, max_tokens: int = 512) -> str:
        """Shorthand for ``complete(LlmRequest(...))``."""
        return self.complete(
            LlmRequest(prompt=prompt, model_tag=model_tag, temperature=temperature, max_tokens=max_tokens)
        )

    def map(self, func: Callable[[Any], Any], items: list[Any]) -> list[Any]:
        """Apply ``func`` to every item on a thread pool, keeping input order.

        The pool is sized to the gateway's parallelism; the gateway's own
        semaphore still bounds in-flight client calls.
        """
        if not items:
            return []
        with ThreadPoolExecutor(max_workers=min(self.parallelism, len(items))) as executor:
            return list(executor.map(func, items))

    def complete_many(self, requests_: list[LlmRequest]) -> list[str]:
        """Complete several requests concurrently, results in input order."""
        return self.map(self.complete, requests_)


class LlmSettings(BaseModel):
    """Gateway configuration.

    Attributes:
        provider: mock (scripted fixture file) or http
        fixtures: Fixture file for the mock provider
        base_url: HTTP endpoint (defaults to LLM_BASE_URL)
        models: Logical model tag -> provider model name
        parallelism: Maximum requests in flight
        cache_dir: Response cache directory (None disables caching)
        retry: Retry policy
    """
    provider: Literal["mock", "http"] = "mock"
    fixtures: str | None = None
    base_url: str | None = None
    models: dict[str, str] = Field(default_factory=lambda: {"large": "gpt-4-turbo", "small": "gpt-4o-mini"})
    parallelism: int = Field(default=8, ge=1)
    cache_dir: str | None = None
    retry: RetryPolicy = Field(default_factory=RetryPolicy)


def build_gateway(settings: LlmSettings) -> LlmGateway:
    """Create the client and gateway described by ``settings``."""
    if settings.provider == "http":
        client: LlmClient = HttpLlmClient(base_url=settings.base_url, models=settings.models)
    elif settings.fixtures:
        client = ScriptedLlmClient.from_file(settings.fixtures)
    else:
        raise ValueError("The mock LLM provider needs a fixtures file")
    cache = ResponseCache(settings.cache_dir) if settings.cache_dir else None
    logger.info(f"LLM gateway: {client.name}, parallelism {settings.parallelism}, cache {settings.cache_dir or 'off'}")
    return LlmGateway(client, cache=cache, policy=settings.retry, parallelism=settings.parallelism)
