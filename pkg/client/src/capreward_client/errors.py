"""Typed client-side errors mirroring the service's structured error bodies."""

from __future__ import annotations


class ClientError(Exception):
    """Base for everything this package raises on purpose."""


class ServiceError(ClientError):
    """An HTTP error response with the service's structured error body.

    ``code``/``message``/``fields`` are lifted from the body's ``error``
    object when present; ``body`` keeps the raw parsed payload.
    """

    def __init__(self, status: int, body: dict | None):
        self.status = status
        self.body = body or {}
        error = self.body.get("error", {}) if isinstance(self.body, dict) else {}
        self.code = error.get("code", "")
        self.fields = error.get("fields", {})
        message = error.get("message", "") or f"HTTP {status}"
        super().__init__(f"{status} {self.code}: {message}" if self.code else message)


class RequestRejected(ServiceError):
    """400: the request body failed validation; never retried."""


class AuthFailed(ServiceError):
    """401: missing or invalid bearer token."""


class NotFound(ServiceError):
    """404: unknown question set or image."""


class ServiceUnavailable(ServiceError):
    """429/503 still failing after every retry attempt."""

    def __init__(self, status: int, body: dict | None, attempts: int):
        super().__init__(status, body)
        self.attempts = attempts


class ConnectionFailed(ClientError):
    """The service could not be reached after every retry attempt."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts
