"""Leakage filtering: keep questions answerable with the image, not without.

Each question is probed K times per condition (image-conditioned and blind)
with fresh option shuffles, and kept only when image accuracy clears a high
bar while blind accuracy stays under a low one. Questions whose probes fail
are quarantined rather than silently kept or dropped.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backend import Backend, ChatRequest
from .errors import BackendError, ProbeError, ValidationError
from .mcq import MCQ, AnswerRecord, ShuffledMCQ, answer_and_grade, render_options, shuffle_mcq
from .seeding import stable_hash64

KEEP = "keep"
DROP_UNANSWERABLE = "drop_unanswerable"
DROP_LEAKY = "drop_leaky"

PROBE_TEMPLATE_BODY = """\
Answer the following multiple-choice question.

Question:
{stem}

Options:
{options}

Reply with the letter of the best option, in the form "Answer: <letter>".
"""


@dataclass(frozen=True)
class FilterConfig:
    k_rounds: int = 4
    tau_img: float = 0.75
    tau_blind: float = 0.25
    probe_temperature: float = 0.0
    max_probe_tokens: int = 32
    global_seed: int = 0

    def __post_init__(self):
        if self.k_rounds < 1:
            raise ValidationError("k_rounds must be >= 1")
        if not (0.0 <= self.tau_blind < self.tau_img <= 1.0):
            raise ValidationError(
                f"thresholds must satisfy 0 <= tau_blind < tau_img <= 1, "
                f"got tau_img={self.tau_img}, tau_blind={self.tau_blind}"
            )


@dataclass(frozen=True)
class FilterVerdict:
    mcq_id: str
    acc_img: float
    acc_blind: float
    k_rounds: int
    decision: str
    rounds_img: tuple[AnswerRecord, ...]
    rounds_blind: tuple[AnswerRecord, ...]

    def to_dict(self) -> dict:
        return {
            "mcq_id": self.mcq_id,
            "acc_img": self.acc_img,
            "acc_blind": self.acc_blind,
            "k_rounds": self.k_rounds,
            "decision": self.decision,
            "rounds_img": [r.to_dict() for r in self.rounds_img],
            "rounds_blind": [r.to_dict() for r in self.rounds_blind],
        }


def render_probe_prompt(smcq: ShuffledMCQ) -> str:
    """Question-only prompt; the image travels as an attachment, if at all."""
    return PROBE_TEMPLATE_BODY.replace("{stem}", smcq.stem).replace(
        "{options}", render_options(smcq)
    )


def _probe_round(
    mcq: MCQ,
    image_uri: str | None,
    condition: str,
    round_index: int,
    config: FilterConfig,
    prober: Backend,
) -> AnswerRecord:
    seed = stable_hash64(config.global_seed, mcq.id, condition, round_index)
    smcq = shuffle_mcq(mcq, seed)
    exchange = prober.complete(
        ChatRequest(
            prompt=render_probe_prompt(smcq),
            image_uri=image_uri,
            temperature=config.probe_temperature,
            max_tokens=config.max_probe_tokens,
            seed=seed,
        )
    )
    return answer_and_grade(exchange.response_text, smcq)


def probe_question(
    mcq: MCQ, image_uri: str, config: FilterConfig, prober: Backend
) -> tuple[float, float, tuple[AnswerRecord, ...], tuple[AnswerRecord, ...]]:
    """K image-conditioned and K blind probes; exact accuracies over K."""
    if not prober.profile.vision_capable:
        raise ValidationError(
            f"prober {prober.profile.name!r} is not vision-capable"
        )
    k = config.k_rounds
    jobs = [("img", i) for i in range(k)] + [("blind", i) for i in range(k)]

    def run(job: tuple[str, int]) -> AnswerRecord:
        condition, i = job
        uri = image_uri if condition == "img" else None
        return _probe_round(mcq, uri, condition, i, config, prober)

    workers = min(len(jobs), prober.profile.in_flight_limit)
    try:
        if workers <= 1:
            records = [run(j) for j in jobs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(run, jobs))
    except BackendError as exc:
        raise ProbeError(
            f"probe failed for question {mcq.id!r}: {exc}", mcq_id=mcq.id
        ) from exc
    rounds_img = tuple(records[:k])
    rounds_blind = tuple(records[k:])
    acc_img = sum(1 for r in rounds_img if r.correct) / k
    acc_blind = sum(1 for r in rounds_blind if r.correct) / k
    return acc_img, acc_blind, rounds_img, rounds_blind


def decide(acc_img: float, acc_blind: float, config: FilterConfig) -> str:
    """Keep iff the image condition clears tau_img and the blind stays under tau_blind."""
    if acc_img >= config.tau_img and acc_blind <= config.tau_blind:
        return KEEP
    if acc_img < config.tau_img:
        return DROP_UNANSWERABLE
    return DROP_LEAKY


def probe_and_decide(
    mcq: MCQ, image_uri: str, config: FilterConfig, prober: Backend
) -> FilterVerdict:
    acc_img, acc_blind, rounds_img, rounds_blind = probe_question(
        mcq, image_uri, config, prober
    )
    return FilterVerdict(
        mcq_id=mcq.id,
        acc_img=acc_img,
        acc_blind=acc_blind,
        k_rounds=config.k_rounds,
        decision=decide(acc_img, acc_blind, config),
        rounds_img=rounds_img,
        rounds_blind=rounds_blind,
    )


@dataclass
class FilterSummary:
    total: int = 0
    kept: int = 0
    dropped_unanswerable: int = 0
    dropped_leaky: int = 0
    errored: int = 0

    def to_dict(self, config: FilterConfig) -> dict:
        keep_rate = self.kept / self.total if self.total else None
        return {
            "total": self.total,
            "kept": self.kept,
            "dropped_unanswerable": self.dropped_unanswerable,
            "dropped_leaky": self.dropped_leaky,
            "errored": self.errored,
            "keep_rate": keep_rate,
            "k_rounds": config.k_rounds,
            # Threshold values are artifact choices, surfaced for audit.
            "tau_img": config.tau_img,
            "tau_blind": config.tau_blind,
            "global_seed": config.global_seed,
        }


def filter_qa_set(
    dataset: list[tuple[MCQ, str]],
    config: FilterConfig,
    prober: Backend,
) -> tuple[list[FilterVerdict], list[FilterVerdict], list[dict], FilterSummary]:
    """Partition (MCQ, image_uri) pairs into kept / dropped / errored.

    Outputs are sorted by mcq_id so the fold is order-independent.
    """
    ids = [mcq.id for mcq, _ in dataset]
    if len(set(ids)) != len(ids):
        raise ValidationError("dataset mcq ids must be unique")
    kept: list[FilterVerdict] = []
    dropped: list[FilterVerdict] = []
    errored: list[dict] = []
    summary = FilterSummary(total=len(dataset))
    for mcq, image_uri in sorted(dataset, key=lambda pair: pair[0].id):
        try:
            verdict = probe_and_decide(mcq, image_uri, config, prober)
        except (ProbeError, ValidationError, OSError) as exc:
            errored.append({"mcq_id": mcq.id, "error": str(exc)})
            summary.errored += 1
            continue
        if verdict.decision == KEEP:
            kept.append(verdict)
            summary.kept += 1
        elif verdict.decision == DROP_UNANSWERABLE:
            dropped.append(verdict)
            summary.dropped_unanswerable += 1
        else:
            dropped.append(verdict)
            summary.dropped_leaky += 1
    return kept, dropped, errored, summary
