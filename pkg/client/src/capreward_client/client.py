"""Blocking HTTP client for the reward service.

One client instance holds a connection pool that is safe for concurrent
use; all calls are synchronous. 429 and 503 responses and transport
failures are retried with exponential backoff; 4xx responses are not.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import httpx

from .errors import (
    AuthFailed,
    ConnectionFailed,
    NotFound,
    RequestRejected,
    ServiceError,
    ServiceUnavailable,
)

_RETRYABLE_STATUSES = (429, 503)


@dataclass(frozen=True)
class ClientConfig:
    base_url: str
    timeout_ms: float = 30_000.0
    max_attempts: int = 3
    base_backoff_ms: float = 100.0
    backoff_multiplier: float = 2.0
    auth_token_env: str = ""

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")


@dataclass(frozen=True)
class ScoreGroupResult:
    group_id: str
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    reports: tuple[dict, ...]
    engine_version: str
    config_echo: dict
    raw: dict = field(repr=False)


@dataclass(frozen=True)
class FilterResult:
    mcq_id: str
    decision: str
    acc_img: float
    acc_blind: float
    k_rounds: int
    raw: dict = field(repr=False)


@dataclass(frozen=True)
class HealthStatus:
    status: str
    backends: dict
    cache_stats: dict
    engine_version: str


class RewardServiceClient:
    def __init__(self, config: ClientConfig):
        self.config = config
        headers = {}
        if config.auth_token_env:
            token = os.environ.get(config.auth_token_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.timeout_ms / 1000.0,
            headers=headers,
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "RewardServiceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _request(self, method: str, path: str, json_body: dict | None = None) -> dict:
        attempts = 0
        last_failure: ServiceUnavailable | ConnectionFailed | None = None
        while attempts < self.config.max_attempts:
            if attempts > 0:
                backoff = self.config.base_backoff_ms * (
                    self.config.backoff_multiplier ** (attempts - 1)
                )
                time.sleep(backoff / 1000.0)
            attempts += 1
            try:
                response = self._http.request(method, path, json=json_body)
            except httpx.HTTPError as exc:
                last_failure = ConnectionFailed(str(exc), attempts)
                continue
            if response.status_code in _RETRYABLE_STATUSES:
                last_failure = ServiceUnavailable(
                    response.status_code, _safe_json(response), attempts
                )
                continue
            return self._finish(response)
        assert last_failure is not None
        last_failure.attempts = attempts
        raise last_failure

    def _finish(self, response: httpx.Response) -> dict:
        if response.status_code == 200:
            return response.json()
        body = _safe_json(response)
        if response.status_code == 400:
            raise RequestRejected(400, body)
        if response.status_code == 401:
            raise AuthFailed(401, body)
        if response.status_code == 404:
            raise NotFound(404, body)
        raise ServiceError(response.status_code, body)

    def score_group(
        self,
        group_id: str,
        image_id: str,
        captions: list[dict],
        question_set,
        n_rounds: int | None = None,
        seed: int | None = None,
    ) -> ScoreGroupResult:
        """Score one rollout group; mirrors the /v1/reward wire fields.

        ``captions`` entries carry caption_id/text/rollout_index;
        ``question_set`` is either a registered set name or inline MCQ dicts.
        """
        body = {
            "group_id": group_id,
            "image_id": image_id,
            "captions": captions,
            "question_set": question_set,
        }
        if n_rounds is not None:
            body["n_rounds"] = n_rounds
        if seed is not None:
            body["seed"] = seed
        data = self._request("POST", "/v1/reward", body)
        return ScoreGroupResult(
            group_id=data["group_id"],
            rewards=tuple(data["rewards"]),
            advantages=tuple(data["advantages"]),
            reports=tuple(data["reports"]),
            engine_version=data["engine_version"],
            config_echo=data["config_echo"],
            raw=data,
        )

    def filter(
        self,
        mcq: dict,
        image_uri: str | None = None,
        k_rounds: int | None = None,
        tau_img: float | None = None,
        tau_blind: float | None = None,
        seed: int | None = None,
    ) -> FilterResult:
        """Probe one question's leakage; mirrors the /v1/filter wire fields."""
        body: dict = {"mcq": mcq}
        if image_uri is not None:
            body["image_uri"] = image_uri
        for key, value in (
            ("k_rounds", k_rounds), ("tau_img", tau_img),
            ("tau_blind", tau_blind), ("seed", seed),
        ):
            if value is not None:
                body[key] = value
        data = self._request("POST", "/v1/filter", body)
        return FilterResult(
            mcq_id=data["mcq_id"],
            decision=data["decision"],
            acc_img=data["acc_img"],
            acc_blind=data["acc_blind"],
            k_rounds=data["k_rounds"],
            raw=data,
        )

    def health(self) -> HealthStatus:
        data = self._request("GET", "/health")
        return HealthStatus(
            status=data["status"],
            backends=data["backends"],
            cache_stats=data["cache_stats"],
            engine_version=data["engine_version"],
        )


def sdk_score_group(config: ClientConfig, *args, **kwargs) -> ScoreGroupResult:
    """One-shot convenience wrapper; see RewardServiceClient.score_group."""
    with RewardServiceClient(config) as client:
        return client.score_group(*args, **kwargs)


def sdk_filter(config: ClientConfig, *args, **kwargs) -> FilterResult:
    """One-shot convenience wrapper; see RewardServiceClient.filter."""
    with RewardServiceClient(config) as client:
        return client.filter(*args, **kwargs)


def sdk_health(config: ClientConfig) -> HealthStatus:
    """One-shot convenience wrapper; see RewardServiceClient.health."""
    with RewardServiceClient(config) as client:
        return client.health()


def _safe_json(response: httpx.Response) -> dict | None:
    try:
        return response.json()
    except ValueError:
        return None
