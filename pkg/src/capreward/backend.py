"""Chat-completion backends: HTTP access, retries, caching, and test doubles.

Every model call in the engine (answering, probing, generation, captioning)
goes through a ``Backend``, which layers a content-addressed response cache,
bounded in-flight concurrency, and retry-with-backoff on top of a transport.
Transports speak the de-facto chat-completions JSON shape; the mock
transports make the whole engine runnable and deterministic with zero
network calls.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import httpx

from .errors import BackendError, ConfigError, ScriptedMissError, ValidationError
from .mcq import normalize_text


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: float = 200.0
    multiplier: float = 2.0
    jitter_ms: float = 0.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ConfigError("retry max_attempts must be >= 1")

    def backoff_before_attempt(self, attempt: int) -> float:
        """Seconds to sleep before attempt number ``attempt`` (2-based)."""
        return self.base_backoff_ms * self.multiplier ** (attempt - 2) / 1000.0


@dataclass(frozen=True)
class BackendProfile:
    """A named model endpoint plus its sampling and admission parameters."""

    name: str
    endpoint: str = ""
    model: str = "mock"
    temperature: float = 0.0
    max_tokens: int = 64
    in_flight_limit: int = 8
    timeout_ms: float = 30_000.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    vision_capable: bool = False
    api_key_env: str = ""

    def __post_init__(self):
        if self.in_flight_limit < 1:
            raise ConfigError(f"profile {self.name!r}: in_flight_limit must be >= 1")


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request: a single user turn, optionally with an image."""

    prompt: str
    image_uri: str | None = None
    temperature: float = 0.0
    max_tokens: int = 64
    seed: int = 0

    def payload(self, model: str) -> dict:
        if self.image_uri is None:
            content = self.prompt
        else:
            content = [
                {"type": "text", "text": self.prompt},
                {"type": "image_url", "image_url": {"url": self.image_uri}},
            ]
        return {
            "model": model,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ChatExchange:
    """A completed request/response pair, as persisted in the cache."""

    cache_key: str
    request: dict
    response_text: str
    finish_reason: str
    usage: dict
    attempt_count: int
    latency_ms: float
    from_cache: bool = False

    def to_dict(self) -> dict:
        return {
            "cache_key": self.cache_key,
            "request": self.request,
            "response_text": self.response_text,
            "finish_reason": self.finish_reason,
            "usage": self.usage,
            "attempt_count": self.attempt_count,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, d: dict, from_cache: bool = False) -> "ChatExchange":
        return cls(
            cache_key=d["cache_key"],
            request=d["request"],
            response_text=d["response_text"],
            finish_reason=d["finish_reason"],
            usage=d["usage"],
            attempt_count=d["attempt_count"],
            latency_ms=d["latency_ms"],
            from_cache=from_cache,
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def cache_key(profile: BackendProfile, request: ChatRequest) -> str:
    """SHA-256 over the canonical serialization of (profile identity, request)."""
    material = canonical_json(
        {
            "profile": profile.name,
            "model": profile.model,
            "request": request.payload(profile.model),
        }
    )
    return sha256(material.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed cache of ChatExchanges.

    Disk layout uses a two-level hex fan-out (ab/cdef...json). Writes are
    atomic per key via temp-file rename; last-writer-wins is safe because
    values are content-determined.
    """

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[str, dict] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        assert self.directory is not None
        return self.directory / key[:2] / f"{key[2:]}.json"

    def get(self, key: str) -> dict | None:
        with self._lock:
            entry = self._mem.get(key)
        if entry is None and self.directory is not None:
            path = self._path(key)
            if path.exists():
                entry = json.loads(path.read_text(encoding="utf-8"))
                with self._lock:
                    self._mem[key] = entry
        with self._lock:
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
        return entry

    def put(self, key: str, entry: dict) -> None:
        with self._lock:
            self._mem[key] = entry
        if self.directory is not None:
            path = self._path(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(canonical_json(entry), encoding="utf-8")
            tmp.replace(path)

    def stats(self) -> dict:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses, "entries": len(self._mem)}


class TransportFailure(Exception):
    """A single transport attempt failed."""

    def __init__(self, message: str, *, status: int | None = None,
                 retryable: bool = True, retry_after: float | None = None):
        super().__init__(message)
        self.status = status
        self.retryable = retryable
        self.retry_after = retry_after


class HttpTransport:
    """Chat-completions over HTTP(S); API key read from the named env var."""

    def __init__(self, profile: BackendProfile):
        self.profile = profile
        self._client = httpx.Client(timeout=profile.timeout_ms / 1000.0)

    def send(self, payload: dict) -> tuple[str, str, dict]:
        headers = {}
        if self.profile.api_key_env:
            key = os.environ.get(self.profile.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(self.profile.endpoint, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportFailure(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            retry_after = None
            if "Retry-After" in resp.headers:
                try:
                    retry_after = float(resp.headers["Retry-After"])
                except ValueError:
                    retry_after = None
            raise TransportFailure(
                f"HTTP {resp.status_code}", status=resp.status_code,
                retryable=True, retry_after=retry_after,
            )
        if resp.status_code >= 400:
            raise TransportFailure(
                f"HTTP {resp.status_code}: {resp.text[:200]}",
                status=resp.status_code, retryable=False,
            )
        body = resp.json()
        choice = body["choices"][0]
        return (
            choice["message"]["content"],
            choice.get("finish_reason", "stop"),
            body.get("usage", {}),
        )

    def ping(self) -> bool:
        try:
            base = self.profile.endpoint.rsplit("/", 1)[0] or self.profile.endpoint
            self._client.get(base, timeout=1.0)
            return True
        except httpx.HTTPError:
            return False


class _InstrumentedTransport:
    """Concurrency bookkeeping shared by the mock transports."""

    def __init__(self):
        self._lock = threading.Lock()
        self.call_count = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.seen_image_flags: list[bool] = []

    def _enter(self, payload: dict) -> None:
        with self._lock:
            self.call_count += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            self.seen_image_flags.append(_payload_has_image(payload))

    def _exit(self) -> None:
        with self._lock:
            self.in_flight -= 1

    def ping(self) -> bool:
        return True


def _payload_has_image(payload: dict) -> bool:
    content = payload["messages"][0]["content"]
    if isinstance(content, list):
        return any(part.get("type") == "image_url" for part in content)
    return False


def _payload_image_uri(payload: dict) -> str:
    content = payload["messages"][0]["content"]
    if isinstance(content, list):
        for part in content:
            if part.get("type") == "image_url":
                return part["image_url"]["url"]
    return ""


def _payload_text(payload: dict) -> str:
    content = payload["messages"][0]["content"]
    if isinstance(content, list):
        return "\n".join(
            part.get("text", "") for part in content if part.get("type") == "text"
        )
    return content


_CAPTION_SECTION = re.compile(r"Description:\n(.*?)\n\nQuestion:", re.S)
_OPTION_LINE = re.compile(r"^([A-H])\. (.*)$", re.M)


class KeywordAnswerTransport(_InstrumentedTransport):
    """Deterministic caption answerer for tests.

    Reads the rendered default answer prompt, and replies "Answer: <L>"
    where L labels the unique option whose normalized text occurs in the
    caption section; if no option matches, or several do, it replies with
    the first label (deliberately wrong on unanswerable questions except
    when the shuffle happens to put the answer first).
    """

    def send(self, payload: dict) -> tuple[str, str, dict]:
        self._enter(payload)
        try:
            text = _payload_text(payload)
            caption_match = _CAPTION_SECTION.search(text)
            caption = normalize_text(caption_match.group(1)) if caption_match else ""
            options = _OPTION_LINE.findall(text)
            if not options:
                raise TransportFailure("no option lines in prompt", retryable=False)
            matched = [
                label for label, opt in options
                if caption and normalize_text(opt) in caption
            ]
            label = matched[0] if len(matched) == 1 else options[0][0]
            return f"Answer: {label}", "stop", {"mock": True}
        finally:
            self._exit()


class ScriptedTransport(_InstrumentedTransport):
    """Pattern-table test double.

    Rules are tried in order; the first whose conditions all hold fires.
    A rule is ``{"match": {...}, "response": ...}`` where match supports
    ``contains`` (substring of the prompt text) and ``has_image``; response
    is a literal string, ``{"answer_label": "A"}``,
    ``{"answer_option_containing": "frisbee"}`` (label of the first option
    line whose text contains the string),
    ``{"answer_option_not_containing": "frisbee"}``, or
    ``{"sequence": [resp, ...]}`` cycling per call to that rule. Requests
    matching no rule raise a scripted-miss error.
    """

    def __init__(self, rules: list[dict]):
        super().__init__()
        self.rules = rules
        self._rule_counters = [0] * len(rules)
        self.fail_first: int = 0  # number of initial calls that 503
        self._failures_served = 0

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedTransport":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def send(self, payload: dict) -> tuple[str, str, dict]:
        self._enter(payload)
        try:
            with self._lock:
                if self._failures_served < self.fail_first:
                    self._failures_served += 1
                    raise TransportFailure("injected 503", status=503, retryable=True)
            text = _payload_text(payload)
            has_image = _payload_has_image(payload)
            for idx, rule in enumerate(self.rules):
                match = rule.get("match", {})
                if "contains" in match and match["contains"] not in text:
                    continue
                if "has_image" in match and match["has_image"] != has_image:
                    continue
                if "image_contains" in match and (
                    match["image_contains"] not in _payload_image_uri(payload)
                ):
                    continue
                return self._render(rule["response"], idx, text), "stop", {"mock": True}
            raise ScriptedMissError(f"no scripted rule matches request: {text[:120]!r}")
        finally:
            self._exit()

    def _render(self, response, rule_idx: int, text: str) -> str:
        if isinstance(response, dict) and "sequence" in response:
            with self._lock:
                n = self._rule_counters[rule_idx]
                self._rule_counters[rule_idx] += 1
            response = response["sequence"][n % len(response["sequence"])]
        if isinstance(response, str):
            return response
        options = _OPTION_LINE.findall(text)
        if "answer_label" in response:
            return f"Answer: {response['answer_label']}"
        if "answer_option_containing" in response:
            needle = normalize_text(response["answer_option_containing"])
            for label, opt in options:
                if needle in normalize_text(opt):
                    return f"Answer: {label}"
            raise ScriptedMissError(f"no option contains {needle!r}")
        if "answer_option_not_containing" in response:
            needle = normalize_text(response["answer_option_not_containing"])
            for label, opt in options:
                if needle not in normalize_text(opt):
                    return f"Answer: {label}"
            raise ScriptedMissError(f"every option contains {needle!r}")
        raise ConfigError(f"unknown scripted response form: {response!r}")


class Backend:
    """Cache- and retry-wrapped handle to one model endpoint.

    Safe to share across threads; in-flight requests never exceed the
    profile's limit; sleep before retry attempt k is
    base_backoff * multiplier^(k-2) (seconds), Retry-After honored on 429.
    """

    def __init__(self, profile: BackendProfile, transport=None,
                 cache: ResponseCache | None = None):
        self.profile = profile
        self.transport = transport if transport is not None else HttpTransport(profile)
        self.cache = cache if cache is not None else ResponseCache()
        self._sem = threading.BoundedSemaphore(profile.in_flight_limit)
        self._lock = threading.Lock()
        self.calls = 0
        self.retries = 0

    def complete(self, request: ChatRequest) -> ChatExchange:
        if request.image_uri is not None and not self.profile.vision_capable:
            raise ValidationError(
                f"profile {self.profile.name!r} is not vision-capable"
            )
        key = cache_key(self.profile, request)
        cached = self.cache.get(key)
        if cached is not None:
            return ChatExchange.from_dict(cached, from_cache=True)

        payload = request.payload(self.profile.model)
        attempt_log: list[str] = []
        started = time.monotonic()
        policy = self.profile.retry
        for attempt in range(1, policy.max_attempts + 1):
            if attempt > 1:
                with self._lock:
                    self.retries += 1
            try:
                with self._sem:
                    with self._lock:
                        self.calls += 1
                    text, finish, usage = self.transport.send(payload)
                exchange = ChatExchange(
                    cache_key=key,
                    request=payload,
                    response_text=text,
                    finish_reason=finish,
                    usage=usage,
                    attempt_count=attempt,
                    latency_ms=(time.monotonic() - started) * 1000.0,
                )
                self.cache.put(key, exchange.to_dict())
                return exchange
            except TransportFailure as exc:
                attempt_log.append(f"attempt {attempt}: {exc}")
                if not exc.retryable:
                    raise BackendError(
                        f"permanent backend error from {self.profile.name!r}: {exc}",
                        attempts=attempt_log,
                    ) from exc
                if attempt == policy.max_attempts:
                    break
                if exc.retry_after is not None:
                    time.sleep(exc.retry_after)
                else:
                    time.sleep(policy.backoff_before_attempt(attempt + 1))
        raise BackendError(
            f"backend {self.profile.name!r} unavailable after "
            f"{policy.max_attempts} attempts",
            attempts=attempt_log,
        )

    def stats(self) -> dict:
        with self._lock:
            out = {"calls": self.calls, "retries": self.retries}
        out.update(self.cache.stats())
        return out

    def ping(self) -> bool:
        ping = getattr(self.transport, "ping", None)
        return bool(ping()) if ping is not None else True
