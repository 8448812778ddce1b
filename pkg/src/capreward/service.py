"""HTTP service exposing reward scoring and QA filtering to trainers.

Responses are a pure function of (body, registered question sets, seed,
engine version): bodies are serialized with sorted keys and carry no
timestamps, so identical requests produce byte-identical JSON. Wall-clock
timing and the request id travel in response headers instead.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid

from fastapi import FastAPI, Request, Response
from starlette.concurrency import run_in_threadpool

from . import __version__ as ENGINE_VERSION
from .config import EngineConfig
from .errors import BackendError, ConfigError, ProbeError, ScoringError, ValidationError
from .filtering import FilterConfig, probe_and_decide
from .mcq import MCQ
from .reward import CaptionSample, RewardConfig, score_group

_HISTOGRAM_BUCKETS_MS = (5, 10, 25, 50, 100, 250, 500, 1000, 2500, float("inf"))


class Metrics:
    def __init__(self):
        self._lock = threading.Lock()
        self.requests: dict[str, int] = {}
        self.reward_latency_buckets = [0] * len(_HISTOGRAM_BUCKETS_MS)
        self.reward_latency_count = 0
        self.reward_latency_sum_ms = 0.0

    def count_request(self, endpoint: str) -> None:
        with self._lock:
            self.requests[endpoint] = self.requests.get(endpoint, 0) + 1

    def observe_reward_latency(self, ms: float) -> None:
        with self._lock:
            self.reward_latency_count += 1
            self.reward_latency_sum_ms += ms
            for i, bound in enumerate(_HISTOGRAM_BUCKETS_MS):
                if ms <= bound:
                    self.reward_latency_buckets[i] += 1
                    break

    def render(self, config: EngineConfig) -> str:
        lines = []
        with self._lock:
            for endpoint in sorted(self.requests):
                lines.append(
                    f'requests_total{{endpoint="{endpoint}"}} {self.requests[endpoint]}'
                )
            cumulative = 0
            for bound, count in zip(_HISTOGRAM_BUCKETS_MS, self.reward_latency_buckets):
                cumulative += count
                label = "+Inf" if bound == float("inf") else str(bound)
                lines.append(f'reward_latency_ms_bucket{{le="{label}"}} {cumulative}')
            lines.append(f"reward_latency_ms_count {self.reward_latency_count}")
            lines.append(f"reward_latency_ms_sum {self.reward_latency_sum_ms:.3f}")
        total_calls = sum(b.calls for b in config.backends.values())
        total_retries = sum(b.retries for b in config.backends.values())
        cache = config.cache.stats()
        lines.append(f"backend_calls_total {total_calls}")
        lines.append(f"backend_retries_total {total_retries}")
        lines.append(f"cache_hits_total {cache['hits']}")
        lines.append(f"cache_misses_total {cache['misses']}")
        return "\n".join(lines) + "\n"


def _json_response(payload: dict, status: int = 200, headers: dict | None = None) -> Response:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return Response(
        content=body, status_code=status, media_type="application/json", headers=headers
    )


def _error(status: int, code: str, message: str, fields: dict | None = None) -> Response:
    payload = {"error": {"code": code, "message": message}}
    if fields:
        payload["error"]["fields"] = fields
    return _json_response(payload, status=status)


def _parse_reward_request(body: dict, config: EngineConfig):
    fields: dict[str, str] = {}
    group_id = body.get("group_id")
    image_id = body.get("image_id")
    if not isinstance(group_id, str) or not group_id:
        fields["group_id"] = "required non-empty string"
    if not isinstance(image_id, str) or not image_id:
        fields["image_id"] = "required non-empty string"
    raw_captions = body.get("captions")
    if not isinstance(raw_captions, list) or not raw_captions:
        fields["captions"] = "required non-empty list"
    captions: list[CaptionSample] = []
    if not fields:
        indices = []
        for i, entry in enumerate(raw_captions):
            if not isinstance(entry, dict) or "caption_id" not in entry or "text" not in entry:
                fields[f"captions[{i}]"] = "must be an object with caption_id and text"
                continue
            idx = entry.get("rollout_index", i)
            indices.append(idx)
            captions.append(
                CaptionSample(
                    caption_id=str(entry["caption_id"]),
                    image_id=image_id,
                    text=str(entry["text"]),
                    rollout_index=int(idx),
                )
            )
        if not fields and sorted(indices) != list(range(len(indices))):
            fields["captions.rollout_index"] = (
                "rollout_index values must be distinct and contiguous from 0"
            )
        if not fields and len({c.caption_id for c in captions}) != len(captions):
            fields["captions.caption_id"] = "caption_ids must be unique"
    if fields:
        raise _FieldErrors(fields)

    question_set = body.get("question_set")
    if isinstance(question_set, list):
        questions = [MCQ.from_dict(q) for q in question_set]
    elif isinstance(question_set, str):
        registered = config.question_sets.get(question_set)
        if registered is None:
            raise _NotFound(f"unknown question set {question_set!r}")
        questions = registered.get(image_id)
        if not questions:
            raise _NotFound(
                f"no questions registered for image {image_id!r} in set {question_set!r}"
            )
    else:
        raise _FieldErrors({"question_set": "must be a list of MCQs or a registered set name"})

    reward_config = RewardConfig(
        n_rounds=int(body.get("n_rounds", config.n_rounds)),
        sampling_mode=body.get("sampling_mode", config.sampling_mode),
        global_seed=int(body.get("seed", config.seed)),
    )
    return group_id, captions, questions, reward_config


class _FieldErrors(Exception):
    def __init__(self, fields: dict[str, str]):
        super().__init__("validation failed")
        self.fields = fields


class _NotFound(Exception):
    pass


def create_app(config: EngineConfig) -> FastAPI:
    app = FastAPI(title="capreward", version=ENGINE_VERSION, docs_url=None, redoc_url=None)
    metrics = Metrics()
    admission = threading.BoundedSemaphore(config.admission_limit)
    app.state.config = config
    app.state.metrics = metrics
    app.state.admission = admission

    def check_auth(request: Request) -> Response | None:
        if not config.auth_token_env:
            return None
        expected = os.environ.get(config.auth_token_env, "")
        got = request.headers.get("Authorization", "")
        if not expected or got != f"Bearer {expected}":
            return _error(401, "unauthorized", "missing or invalid bearer token")
        return None

    def request_headers(request: Request) -> dict:
        return {
            "X-Request-Id": request.headers.get("X-Request-Id", str(uuid.uuid4())),
        }

    @app.post("/v1/reward")
    async def handle_reward(request: Request) -> Response:
        metrics.count_request("/v1/reward")
        denied = check_auth(request)
        if denied is not None:
            return denied
        headers = request_headers(request)
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            return _error(400, "malformed_json", str(exc))
        if not admission.acquire(blocking=False):
            return _error(429, "overloaded", "admission limit reached; retry later")
        started = time.monotonic()
        try:
            try:
                group_id, captions, questions, reward_config = _parse_reward_request(
                    body, config
                )
            except _FieldErrors as exc:
                return _error(400, "invalid_request", "validation failed", exc.fields)
            except _NotFound as exc:
                return _error(404, "not_found", str(exc))
            except (ValidationError, ValueError) as exc:
                return _error(400, "invalid_request", str(exc))
            try:
                reports, advantage = await run_in_threadpool(
                    score_group,
                    captions,
                    questions,
                    reward_config,
                    config.answerer,
                    epsilon=config.epsilon,
                    group_id=group_id,
                )
            except ScoringError as exc:
                return _error(
                    503,
                    "backend_unavailable",
                    str(exc),
                    {"caption_id": exc.caption_id, "round_index": str(exc.round_index)},
                )
            except ValidationError as exc:
                return _error(400, "invalid_request", str(exc))
            payload = {
                "group_id": group_id,
                "rewards": list(advantage.rewards),
                "advantages": list(advantage.advantages),
                "reports": [r.to_dict() for r in reports],
                "engine_version": ENGINE_VERSION,
                "config_echo": {
                    "n_rounds": reward_config.n_rounds,
                    "sampling_mode": reward_config.sampling_mode,
                    "seed": reward_config.global_seed,
                    "epsilon": config.epsilon,
                },
            }
            elapsed_ms = (time.monotonic() - started) * 1000.0
            metrics.observe_reward_latency(elapsed_ms)
            headers["X-Duration-Ms"] = f"{elapsed_ms:.3f}"
            return _json_response(payload, headers=headers)
        finally:
            admission.release()

    @app.post("/v1/filter")
    async def handle_filter(request: Request) -> Response:
        metrics.count_request("/v1/filter")
        denied = check_auth(request)
        if denied is not None:
            return denied
        headers = request_headers(request)
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            return _error(400, "malformed_json", str(exc))
        if not isinstance(body.get("mcq"), dict):
            return _error(400, "invalid_request", "validation failed", {"mcq": "required object"})
        try:
            mcq = MCQ.from_dict(body["mcq"])
            filter_config = FilterConfig(
                k_rounds=int(body.get("k_rounds", 4)),
                tau_img=float(body.get("tau_img", 0.75)),
                tau_blind=float(body.get("tau_blind", 0.25)),
                global_seed=int(body.get("seed", config.seed)),
            )
        except (ValidationError, ValueError) as exc:
            return _error(400, "invalid_request", str(exc))
        try:
            prober = config.prober
        except ConfigError as exc:
            return _error(503, "no_prober", str(exc))
        if not prober.profile.vision_capable:
            return _error(
                503, "capability",
                f"prober {prober.profile.name!r} is not vision-capable",
            )
        image_uri = body.get("image_uri") or f"image://{mcq.image_id}"
        try:
            verdict = await run_in_threadpool(
                probe_and_decide, mcq, image_uri, filter_config, prober
            )
        except ProbeError as exc:
            return _error(503, "backend_unavailable", str(exc), {"mcq_id": exc.mcq_id})
        return _json_response(verdict.to_dict(), headers=headers)

    @app.get("/health")
    async def handle_health() -> Response:
        metrics.count_request("/health")
        backends = {
            name: await run_in_threadpool(b.ping)
            for name, b in config.backends.items()
        }
        payload = {
            "status": "ok" if all(backends.values()) else "degraded",
            "backends": backends,
            "cache_stats": config.cache.stats(),
            "engine_version": ENGINE_VERSION,
        }
        return _json_response(payload)

    @app.get("/metrics")
    async def handle_metrics() -> Response:
        return Response(content=metrics.render(config), media_type="text/plain")

    return app
