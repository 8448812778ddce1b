"""Decoupled two-stage VQA evaluation.

Stage 1: a vision-capable captioner describes each image; captions are
persisted so Stage 2 can be re-run without re-captioning. Stage 2: a
text-only answerer takes each benchmark question from the caption alone
(one seeded shuffle per item); per-benchmark accuracy is the exact
fraction of correct answers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backend import Backend, ChatRequest
from .errors import BackendError, ValidationError
from .mcq import (
    MCQ,
    DEFAULT_ANSWER_TEMPLATE,
    PromptTemplate,
    answer_and_grade,
    render_answer_prompt,
    shuffle_mcq,
)
from .seeding import stable_hash64

DEFAULT_CAPTION_PROMPT = (
    "Describe this image in detail. Mention every object, its attributes, "
    "any text, and the relationships between objects."
)


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    benchmark: str
    image_id: str
    mcq: MCQ

    @classmethod
    def from_dict(cls, d: dict) -> "EvalItem":
        try:
            return cls(
                item_id=d["item_id"],
                benchmark=d["benchmark"],
                image_id=d["image_id"],
                mcq=MCQ.from_dict(d["mcq"]),
            )
        except KeyError as exc:
            raise ValidationError(f"malformed eval item: missing {exc}") from exc


@dataclass(frozen=True)
class EvalResult:
    benchmark: str
    n_items: int
    per_item: tuple[tuple[str, bool], ...]
    accuracy: float
    captioner_profile: str
    answerer_profile: str
    excluded: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "n_items": self.n_items,
            "per_item": [[item_id, correct] for item_id, correct in self.per_item],
            "accuracy": self.accuracy,
            "captioner_profile": self.captioner_profile,
            "answerer_profile": self.answerer_profile,
            "excluded": list(self.excluded),
        }


def run_caption_stage(
    images: list,
    captioner: Backend,
    caption_prompt: str = DEFAULT_CAPTION_PROMPT,
    seed: int = 0,
) -> tuple[dict[str, str], list[dict]]:
    """Caption every image; failures are recorded and excluded, not fatal.

    ``images`` is a list of objects with ``image_id`` and ``uri``.
    """
    if not captioner.profile.vision_capable:
        raise ValidationError(
            f"captioner {captioner.profile.name!r} is not vision-capable"
        )

    def run(image) -> str:
        exchange = captioner.complete(
            ChatRequest(
                prompt=caption_prompt,
                image_uri=image.uri,
                temperature=captioner.profile.temperature,
                max_tokens=captioner.profile.max_tokens,
                seed=stable_hash64(seed, image.image_id, "caption"),
            )
        )
        return exchange.response_text

    captions: dict[str, str] = {}
    failures: list[dict] = []
    workers = min(max(len(images), 1), captioner.profile.in_flight_limit)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(run, img): img for img in images}
        for fut, img in futures.items():
            try:
                captions[img.image_id] = fut.result()
            except BackendError as exc:
                failures.append({"image_id": img.image_id, "error": str(exc)})
    return captions, failures


def run_answer_stage(
    captions: dict[str, str],
    items: list[EvalItem],
    answerer: Backend,
    seed: int = 0,
    template: PromptTemplate = DEFAULT_ANSWER_TEMPLATE,
    captioner_profile: str = "",
) -> dict[str, EvalResult]:
    """Answer each item once from its caption; aggregate per benchmark.

    The answerer never sees an image: requests carry caption text only.
    """
    by_benchmark: dict[str, list[tuple[str, bool]]] = {}
    excluded: dict[str, list[str]] = {}

    def run(item: EvalItem) -> tuple[str, bool]:
        instance_seed = stable_hash64(seed, item.item_id, "eval")
        smcq = shuffle_mcq(item.mcq, instance_seed)
        prompt = render_answer_prompt(captions[item.image_id], smcq, template)
        exchange = answerer.complete(
            ChatRequest(
                prompt=prompt,
                temperature=answerer.profile.temperature,
                max_tokens=answerer.profile.max_tokens,
                seed=instance_seed,
            )
        )
        record = answer_and_grade(exchange.response_text, smcq)
        return item.item_id, record.correct

    runnable = []
    for item in items:
        if item.image_id not in captions:
            excluded.setdefault(item.benchmark, []).append(item.item_id)
        else:
            runnable.append(item)
    workers = min(max(len(runnable), 1), answerer.profile.in_flight_limit)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(run, runnable))
    for item, (item_id, correct) in zip(runnable, outcomes):
        by_benchmark.setdefault(item.benchmark, []).append((item_id, correct))

    results: dict[str, EvalResult] = {}
    for benchmark, per_item in sorted(by_benchmark.items()):
        per_item = sorted(per_item)
        n = len(per_item)
        results[benchmark] = EvalResult(
            benchmark=benchmark,
            n_items=n,
            per_item=tuple(per_item),
            accuracy=sum(1 for _, c in per_item if c) / n,
            captioner_profile=captioner_profile,
            answerer_profile=answerer.profile.name,
            excluded=tuple(excluded.get(benchmark, ())),
        )
    return results


def aggregate(results: dict[str, EvalResult]) -> dict:
    """Per-benchmark accuracies plus their unweighted macro average."""
    if not results:
        raise ValidationError("no results to aggregate")
    accs = {name: res.accuracy for name, res in sorted(results.items())}
    macro = sum(accs.values()) / len(accs)
    return {
        "benchmarks": accs,
        "macro_average": macro,
        "macro_average_rounded": round(macro * 100, 1),
    }


def render_summary_table(summary: dict) -> str:
    """Plaintext table of per-benchmark accuracy and the macro average."""
    rows = [("benchmark", "accuracy")]
    for name, acc in summary["benchmarks"].items():
        rows.append((name, f"{acc * 100:.1f}"))
    rows.append(("average", f"{summary['macro_average'] * 100:.1f}"))
    width = max(len(name) for name, _ in rows) + 2
    return "\n".join(f"{name:<{width}}{acc}" for name, acc in rows)
