"""Tests for the LLM gateway, its retry policy and response cache."""

import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests
from pydantic import ValidationError

from app.pipeline.llm import (
    HttpLlmClient,
    LlmError,
    LlmGateway,
    LlmMalformedResponseError,
    LlmRateLimitError,
    LlmRequest,
    LlmRetryExhaustedError,
    LlmSettings,
    LlmTransportError,
    ResponseCache,
    RetryPolicy,
    ScriptedLlmClient,
    ScriptRule,
    build_gateway,
    complete_with_retry,
)


def test_request_validation():
    with pytest.raises(ValidationError):
        LlmRequest(prompt="")
    with pytest.raises(ValidationError):
        LlmRequest(prompt="hi", temperature=-0.1)
    with pytest.raises(ValidationError):
        LlmRequest(prompt="hi", top_p=0.5)
    request = LlmRequest(prompt="hi")
    with pytest.raises(ValidationError):
        request.prompt = "other"


def test_success_takes_one_attempt(scripted_gateway):
    gateway = scripted_gateway(default="ok")
    assert gateway.ask("hello") == "ok"
    assert len(gateway.client.calls) == 1
    assert gateway.stats.client_calls == 1


def test_two_failures_then_success(scripted_gateway, log_records):
    gateway = scripted_gateway(default="ok", fail_times=2, max_attempts=3)
    assert gateway.ask("hello") == "ok"
    assert len(gateway.client.calls) == 3
    warnings = [r for r in log_records.records if "LLM attempt" in r.getMessage()]
    assert len(warnings) == 2


def test_retry_exhaustion_lists_every_attempt(scripted_gateway):
    gateway = scripted_gateway(default="ok", fail_times=10, max_attempts=2, failure=LlmRateLimitError)
    with pytest.raises(LlmRetryExhaustedError) as excinfo:
        gateway.ask("hello")
    attempts = excinfo.value.attempts
    assert [a.attempt for a in attempts] == [1, 2]
    assert all(a.error_type == "LlmRateLimitError" for a in attempts)
    assert len(gateway.client.calls) == 2


def test_backoff_is_exponential():
    sleeps = []
    client = ScriptedLlmClient(default="ok", fail_times=3)
    policy = RetryPolicy(max_attempts=4, backoff_base=1.0, backoff_max=3.0)
    assert complete_with_retry(client, LlmRequest(prompt="x"), policy, sleep=sleeps.append) == "ok"
    assert sleeps == [1.0, 2.0, 3.0]


def test_non_retryable_error_is_raised_at_once(scripted_gateway):
    def refuse(request):
        raise LlmError("HTTP 400: bad request")

    gateway = scripted_gateway(responder=refuse, max_attempts=4)
    with pytest.raises(LlmError) as excinfo:
        gateway.ask("hello")
    assert not isinstance(excinfo.value, LlmRetryExhaustedError)
    assert len(gateway.client.calls) == 1


def test_missing_scripted_response():
    with pytest.raises(LookupError):
        ScriptedLlmClient().complete(LlmRequest(prompt="unknown"))


def test_scripted_resolution_order():
    request = LlmRequest(prompt="describe the lighting", model_tag="small")
    fixtures = {request.prompt_sha256: "from fixture"}
    rules = [ScriptRule(contains="lighting", response="large rule", model_tag="large"),
             ScriptRule(contains="lighting", response="any rule")]
    assert ScriptedLlmClient(rules=rules, fixtures=fixtures).complete(request) == "any rule"
    assert ScriptedLlmClient(fixtures=fixtures, default="d").complete(request) == "from fixture"
    assert ScriptedLlmClient(responder=lambda r: None, default="d").complete(request) == "d"
    assert ScriptedLlmClient(responder=lambda r: "cb", rules=rules).complete(request) == "cb"


def test_cache_hit_does_not_resend(scripted_gateway, tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    gateway = scripted_gateway(default="cached text", cache=cache)
    assert gateway.ask("hello") == "cached text"
    assert gateway.ask("hello") == "cached text"
    assert len(gateway.client.calls) == 1
    assert gateway.stats.cache_hits == 1

    warm = scripted_gateway(default="different", cache=ResponseCache(tmp_path / "cache"))
    assert warm.ask("hello") == "cached text"
    assert warm.client.calls == []
    assert warm.ask("hello", model_tag="small") == "different"
    assert warm.ask("hello", temperature=0.7) == "different"


def test_cache_files_hold_response_and_key(tmp_path):
    cache = ResponseCache(tmp_path)
    request = LlmRequest(prompt="p", model_tag="small")
    cache.put(request, "answer")
    path = cache.path(request)
    assert path.parent == tmp_path and path.suffix == ".json"
    assert cache.get(request) == "answer"
    assert cache.get(LlmRequest(prompt="q")) is None


def test_in_flight_never_exceeds_parallelism(scripted_gateway):
    active = 0
    peak = 0
    lock = threading.Lock()

    def slow(request):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        time.sleep(0.02)
        with lock:
            active -= 1
        return request.prompt.upper()

    gateway = scripted_gateway(parallelism=3, responder=slow)
    with ThreadPoolExecutor(max_workers=12) as executor:
        results = list(executor.map(gateway.ask, [f"p{i}" for i in range(30)]))
    assert results == [f"P{i}" for i in range(30)]
    assert peak <= 3
    assert gateway.stats.max_in_flight <= 3


def test_complete_many_keeps_order(scripted_gateway):
    gateway = scripted_gateway(parallelism=4, responder=lambda r: r.prompt[::-1])
    requests_ = [LlmRequest(prompt=f"abc{i}") for i in range(10)]
    assert gateway.complete_many(requests_) == [f"{i}cba" for i in range(10)]
    assert gateway.map(len, []) == []


def test_gateway_rejects_zero_parallelism():
    with pytest.raises(ValueError):
        build_gateway(LlmSettings(parallelism=0))
    with pytest.raises(ValueError):
        LlmGateway(ScriptedLlmClient(), parallelism=0)


class _FakeResponse:
    def __init__(self, status_code=200, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("no json")
        return self._body


class _FakeSession:
    def __init__(self, response):
        self.response = response
        self.posts = []

    def post(self, url, json=None, timeout=None):
        self.posts.append((url, json, timeout))
        if isinstance(self.response, Exception):
            raise self.response
        return self.response


def _http_client(monkeypatch, response):
    client = HttpLlmClient(base_url="http://llm.local/v1/", api_key="k", models={"small": "tiny-model"}, timeout=5)
    session = _FakeSession(response)
    monkeypatch.setattr(client, "_session", lambda: session)
    return client, session


def test_http_payload_and_success(monkeypatch):
    body = {"choices": [{"message": {"content": "Answer: B"}}]}
    client, session = _http_client(monkeypatch, _FakeResponse(body=body))
    request = LlmRequest(prompt="q", model_tag="small", max_tokens=64)
    assert client.complete(request) == "Answer: B"
    url, payload, timeout = session.posts[0]
    assert url == "http://llm.local/v1/chat/completions"
    assert payload == {
        "model": "tiny-model",
        "messages": [{"role": "user", "content": "q"}],
        "max_tokens": 64,
        "temperature": 0.0,
    }
    assert timeout == 5
    assert client.payload(LlmRequest(prompt="q", model_tag="huge"))["model"] == "huge"


@pytest.mark.parametrize(
    "response, error",
    [
        (_FakeResponse(status_code=429, text="slow down"), LlmRateLimitError),
        (_FakeResponse(status_code=503, text="unavailable"), LlmTransportError),
        (_FakeResponse(status_code=400, text="bad"), LlmError),
        (_FakeResponse(body={"choices": []}), LlmMalformedResponseError),
        (_FakeResponse(body=None, text="<html>"), LlmMalformedResponseError),
        (_FakeResponse(body={"choices": [{"message": {"content": None}}]}), LlmMalformedResponseError),
        (requests.ConnectionError("refused"), LlmTransportError),
    ],
)
def test_http_error_mapping(monkeypatch, response, error):
    client, _ = _http_client(monkeypatch, response)
    with pytest.raises(error):
        client.complete(LlmRequest(prompt="q"))


def test_from_file_and_build_gateway(tmp_path):
    fixture = tmp_path / "llm.yaml"
    fixture.write_text(
        "name: scripted\n"
        "default: fallback\n"
        "rules:\n"
        "  - contains: lighting\n"
        "    response: soft light\n",
        encoding="utf-8",
    )
    client = ScriptedLlmClient.from_file(fixture)
    assert client.name == "scripted"
    assert client.complete(LlmRequest(prompt="the lighting")) == "soft light"

    gateway = build_gateway(LlmSettings(fixtures=str(fixture), cache_dir=str(tmp_path / "c"), parallelism=2))
    assert gateway.name == "scripted"
    assert gateway.parallelism == 2
    assert gateway.ask("anything") == "fallback"
    assert list((tmp_path / "c").glob("*.json"))

    with pytest.raises(ValueError):
        build_gateway(LlmSettings())
