"""Engine configuration: backend construction and config-file loading.

One JSON file describes the model backends (by profile), scoring defaults,
and the question-set registry. Secrets never live in config files; API
keys are named environment variables on the profile.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .backend import (
    Backend,
    BackendProfile,
    HttpTransport,
    KeywordAnswerTransport,
    ResponseCache,
    RetryPolicy,
    ScriptedTransport,
)
from .errors import ConfigError
from .jsonl import read_jsonl
from .mcq import MCQ

TRANSPORTS = ("http", "mock-keyword", "scripted")


def build_profile(name: str, spec: dict) -> BackendProfile:
    retry_spec = spec.get("retry", {})
    try:
        return BackendProfile(
            name=name,
            endpoint=spec.get("endpoint", ""),
            model=spec.get("model", "mock"),
            temperature=float(spec.get("temperature", 0.0)),
            max_tokens=int(spec.get("max_tokens", 64)),
            in_flight_limit=int(spec.get("in_flight_limit", 8)),
            timeout_ms=float(spec.get("timeout_ms", 30_000)),
            retry=RetryPolicy(
                max_attempts=int(retry_spec.get("max_attempts", 3)),
                base_backoff_ms=float(retry_spec.get("base_backoff_ms", 200)),
                multiplier=float(retry_spec.get("multiplier", 2.0)),
                jitter_ms=float(retry_spec.get("jitter_ms", 0.0)),
            ),
            vision_capable=bool(spec.get("vision_capable", False)),
            api_key_env=spec.get("api_key_env", ""),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backend {name!r}: {exc}") from exc


def build_backend(
    name: str,
    spec: dict,
    cache: ResponseCache | None = None,
    base_dir: Path | None = None,
) -> Backend:
    profile = build_profile(name, spec)
    transport_kind = spec.get("transport", "http")
    if transport_kind == "http":
        if not profile.endpoint:
            raise ConfigError(f"backend {name!r}: http transport requires an endpoint")
        transport = HttpTransport(profile)
    elif transport_kind == "mock-keyword":
        transport = KeywordAnswerTransport()
    elif transport_kind == "scripted":
        script = spec.get("script")
        if script is None:
            raise ConfigError(f"backend {name!r}: scripted transport requires 'script'")
        if isinstance(script, str):
            path = Path(script)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                script = json.loads(path.read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"backend {name!r}: cannot read script: {exc}") from exc
        transport = ScriptedTransport(script)
    else:
        raise ConfigError(
            f"backend {name!r}: unknown transport {transport_kind!r} "
            f"(expected one of {TRANSPORTS})"
        )
    return Backend(profile, transport=transport, cache=cache)


def load_question_set(path: str | os.PathLike) -> dict[str, list[MCQ]]:
    """Load an MCQ JSONL file, grouped by image_id; ids must be unique."""
    by_image: dict[str, list[MCQ]] = {}
    seen: set[str] = set()
    for record in read_jsonl(path):
        mcq = MCQ.from_dict(record)
        if mcq.id in seen:
            raise ConfigError(f"{path}: duplicate mcq id {mcq.id!r}")
        seen.add(mcq.id)
        by_image.setdefault(mcq.image_id, []).append(mcq)
    return by_image


class EngineConfig:
    """Parsed engine configuration with lazily built backends."""

    def __init__(self, raw: dict, base_dir: Path | None = None):
        self.raw = raw
        self.base_dir = base_dir
        cache_dir = raw.get("cache_dir")
        if cache_dir and base_dir is not None and not Path(cache_dir).is_absolute():
            cache_dir = base_dir / cache_dir
        self.cache = ResponseCache(cache_dir)
        backends_spec = raw.get("backends")
        if not isinstance(backends_spec, dict) or not backends_spec:
            raise ConfigError("config must define a non-empty 'backends' object")
        self.backends: dict[str, Backend] = {
            name: build_backend(name, spec, cache=self.cache, base_dir=base_dir)
            for name, spec in backends_spec.items()
        }
        self.answerer_name = raw.get("answerer")
        self.prober_name = raw.get("prober")
        for role, name in (("answerer", self.answerer_name), ("prober", self.prober_name)):
            if name is not None and name not in self.backends:
                raise ConfigError(f"{role} {name!r} is not a configured backend")
        self.n_rounds = int(raw.get("n_rounds", 4))
        self.seed = int(raw.get("seed", 0))
        self.sampling_mode = raw.get("sampling_mode", "coverage_first")
        self.epsilon = float(raw.get("epsilon", 1e-6))
        self.admission_limit = int(raw.get("admission_limit", 64))
        self.auth_token_env = raw.get("auth_token_env")
        self.host = raw.get("host", "127.0.0.1")
        self.port = int(raw.get("port", 8080))
        self.question_sets: dict[str, dict[str, list[MCQ]]] = {}
        for set_name, set_path in raw.get("question_sets", {}).items():
            path = Path(set_path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            self.question_sets[set_name] = load_question_set(path)

    def backend(self, name: str) -> Backend:
        try:
            return self.backends[name]
        except KeyError:
            raise ConfigError(f"unknown backend {name!r}") from None

    @property
    def answerer(self) -> Backend:
        if self.answerer_name is None:
            raise ConfigError("no 'answerer' backend configured")
        return self.backends[self.answerer_name]

    @property
    def prober(self) -> Backend:
        if self.prober_name is None:
            raise ConfigError("no 'prober' backend configured")
        return self.backends[self.prober_name]


def load_engine_config(path: str | os.PathLike) -> EngineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return EngineConfig(raw, base_dir=path.parent)
