"""Trainer-side client for the caption-reward HTTP service."""

from .client import (
    ClientConfig,
    FilterResult,
    HealthStatus,
    RewardServiceClient,
    ScoreGroupResult,
    sdk_filter,
    sdk_health,
    sdk_score_group,
)
from .errors import (
    AuthFailed,
    ClientError,
    ConnectionFailed,
    NotFound,
    RequestRejected,
    ServiceError,
    ServiceUnavailable,
)

__version__ = "0.1.0"

__all__ = [
    "AuthFailed",
    "ClientConfig",
    "ClientError",
    "ConnectionFailed",
    "FilterResult",
    "HealthStatus",
    "NotFound",
    "RequestRejected",
    "RewardServiceClient",
    "ScoreGroupResult",
    "ServiceError",
    "ServiceUnavailable",
    "sdk_filter",
    "sdk_health",
    "sdk_score_group",
    "__version__",
]
