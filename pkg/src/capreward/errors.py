"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class CapRewardError(Exception):
    """Base class for all engine errors."""


class ValidationError(CapRewardError):
    """Input data violates a documented invariant."""


class ConfigError(CapRewardError):
    """Configuration is malformed or self-contradictory."""


class EmptyQuestionSetError(ValidationError):
    """A scoring request arrived with zero questions."""


class BackendError(CapRewardError):
    """A backend call failed permanently (after retries where applicable)."""

    def __init__(self, message: str, *, attempts: list[str] | None = None):
        super().__init__(message)
        self.attempts = attempts or []


class ScriptedMissError(BackendError):
    """The scripted mock backend received a request no rule matches."""


class ScoringError(CapRewardError):
    """A caption could not be scored; no partial reward is emitted."""

    def __init__(self, message: str, *, caption_id: str, round_index: int):
        super().__init__(message)
        self.caption_id = caption_id
        self.round_index = round_index


class ProbeError(CapRewardError):
    """A filtering probe failed; the question is quarantined, not decided."""

    def __init__(self, message: str, *, mcq_id: str):
        super().__init__(message)
        self.mcq_id = mcq_id


class GenerationError(CapRewardError):
    """QA generation produced no parseable questions for an image."""
