"""Caption reward: answer N shuffled question instances and average.

A caption's reward is the exact fraction of correctly answered question
instances. Which questions are asked, and how each instance is shuffled,
is a pure function of (global seed, caption id, round index, question id),
so concurrency and reruns cannot change a score.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

from .backend import Backend, ChatRequest
from .errors import (
    BackendError,
    EmptyQuestionSetError,
    ScoringError,
    ValidationError,
)
from .grpo import DEFAULT_EPSILON, GroupAdvantage, compute_group_advantages
from .mcq import (
    MCQ,
    DEFAULT_ANSWER_TEMPLATE,
    AnswerRecord,
    PromptTemplate,
    answer_and_grade,
    render_answer_prompt,
    shuffle_mcq,
)
from .seeding import SplitMix64, stable_hash64

COVERAGE_FIRST = "coverage_first"
WITH_REPLACEMENT = "with_replacement"


@dataclass(frozen=True)
class RewardConfig:
    n_rounds: int = 4
    sampling_mode: str = COVERAGE_FIRST
    global_seed: int = 0
    answer_temperature: float = 0.0
    max_answer_tokens: int = 32
    template: PromptTemplate = DEFAULT_ANSWER_TEMPLATE

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValidationError("n_rounds must be >= 1")
        if self.sampling_mode not in (COVERAGE_FIRST, WITH_REPLACEMENT):
            raise ValidationError(f"unknown sampling_mode {self.sampling_mode!r}")


@dataclass(frozen=True)
class CaptionSample:
    caption_id: str
    image_id: str
    text: str
    rollout_index: int = 0


@dataclass(frozen=True)
class RewardReport:
    caption_id: str
    n_rounds: int
    rounds: tuple[AnswerRecord, ...]
    reward: float

    def to_dict(self) -> dict:
        return {
            "caption_id": self.caption_id,
            "n_rounds": self.n_rounds,
            "rounds": [r.to_dict() for r in self.rounds],
            "reward": self.reward,
        }


def plan_rounds(
    question_ids: list[str], config: RewardConfig, caption_id: str
) -> list[tuple[str, int]]:
    """Choose (question_id, instance_seed) for each of the N rounds.

    coverage_first cycles the full question list floor(N/M) times, then
    draws the remaining N mod M questions without replacement;
    with_replacement draws N i.i.d. uniform questions. Instance seeds are
    stable_hash64(global_seed, caption_id, round_index, question_id).
    """
    m = len(question_ids)
    if m == 0:
        raise EmptyQuestionSetError(f"no questions to plan for caption {caption_id!r}")
    n = config.n_rounds
    rng = SplitMix64(stable_hash64(config.global_seed, caption_id, "plan"))
    chosen: list[str] = []
    if config.sampling_mode == COVERAGE_FIRST:
        for _ in range(n // m):
            chosen.extend(question_ids)
        remainder = n % m
        if remainder:
            pool = list(question_ids)
            for _ in range(remainder):
                idx = rng.below(len(pool))
                chosen.append(pool.pop(idx))
    else:
        chosen = [question_ids[rng.below(m)] for _ in range(n)]
    return [
        (qid, stable_hash64(config.global_seed, caption_id, round_index, qid))
        for round_index, qid in enumerate(chosen)
    ]


def _run_round(
    caption: CaptionSample,
    mcq: MCQ,
    instance_seed: int,
    config: RewardConfig,
    answerer: Backend,
) -> AnswerRecord:
    smcq = shuffle_mcq(mcq, instance_seed)
    prompt = render_answer_prompt(caption.text, smcq, config.template)
    exchange = answerer.complete(
        ChatRequest(
            prompt=prompt,
            temperature=config.answer_temperature,
            max_tokens=config.max_answer_tokens,
            seed=instance_seed,
        )
    )
    return answer_and_grade(exchange.response_text, smcq)


def score_caption(
    caption: CaptionSample,
    questions: list[MCQ],
    config: RewardConfig,
    answerer: Backend,
) -> RewardReport:
    """Score one caption: shuffle, ask, parse, grade, average.

    Rounds fan out concurrently up to the backend's in-flight limit; the
    report lists them in round order regardless of completion order. A
    round that fails after retries aborts the whole score: infrastructure
    faults must not masquerade as low caption quality.
    """
    for q in questions:
        if q.image_id != caption.image_id:
            raise ValidationError(
                f"question {q.id!r} belongs to image {q.image_id!r}, "
                f"caption {caption.caption_id!r} to {caption.image_id!r}"
            )
    by_id = {q.id: q for q in questions}
    plan = plan_rounds(sorted(by_id), config, caption.caption_id)

    def run(qid: str, seed: int) -> AnswerRecord:
        return _run_round(caption, by_id[qid], seed, config, answerer)

    workers = min(len(plan), answerer.profile.in_flight_limit)
    if workers <= 1:
        outcomes = []
        for qid, seed in plan:
            try:
                outcomes.append(run(qid, seed))
            except BackendError as exc:
                outcomes.append(exc)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, qid, seed) for qid, seed in plan]
            outcomes = []
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except BackendError as exc:
                    outcomes.append(exc)
    for round_index, outcome in enumerate(outcomes):
        if isinstance(outcome, BackendError):
            raise ScoringError(
                f"caption {caption.caption_id!r}: round {round_index} failed "
                f"after retries: {outcome}",
                caption_id=caption.caption_id,
                round_index=round_index,
            ) from outcome
    records = outcomes
    n = config.n_rounds
    reward = float(Fraction(sum(1 for r in records if r.correct), n))
    return RewardReport(
        caption_id=caption.caption_id,
        n_rounds=n,
        rounds=tuple(records),
        reward=reward,
    )


def score_group(
    captions: list[CaptionSample],
    questions: list[MCQ],
    config: RewardConfig,
    answerer: Backend,
    epsilon: float = DEFAULT_EPSILON,
    group_id: str = "",
) -> tuple[list[RewardReport], GroupAdvantage]:
    """Score a rollout group and normalize its rewards into advantages."""
    if not captions:
        raise ValidationError("caption group must be non-empty")
    image_ids = {c.image_id for c in captions}
    if len(image_ids) != 1:
        raise ValidationError(f"mixed image_ids in group: {sorted(image_ids)}")
    if len({c.caption_id for c in captions}) != len(captions):
        raise ValidationError("caption_ids must be unique within a group")
    ordered = sorted(captions, key=lambda c: c.rollout_index)
    reports = [score_caption(c, questions, config, answerer) for c in ordered]
    advantage = compute_group_advantages(
        [r.reward for r in reports], epsilon=epsilon, group_id=group_id
    )
    return reports, advantage
