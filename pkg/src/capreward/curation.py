"""QA generation and image-set hygiene: parsing generator output into MCQs,
semantic dedup over ingested embeddings, and benchmark-overlap flagging.

Dedup is exact pairwise at desk scale with a greedy keep-first pass over
records sorted by image_id, so the kept set is independent of input order
and checkable against a brute-force oracle.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backend import Backend, ChatRequest
from .errors import BackendError, GenerationError, ValidationError
from .mcq import LABELS, MCQ

GEN_TEMPLATE_BODY = """\
Look at the image and write {per_image} multiple-choice questions that can
only be answered by examining the image. Each question must have
{option_count} options and exactly one correct answer.

Format every question as a numbered block:

1. <question text>
A. <option>
B. <option>
C. <option>
D. <option>
Answer: <letter>

Do not add any other text.
"""


@dataclass(frozen=True)
class ImageRef:
    """An image identified by content digest; image_id is the sha256 prefix."""

    image_id: str
    uri: str
    sha256: str
    source: str = ""
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not re.fullmatch(r"[0-9a-f]{64}", self.sha256):
            raise ValidationError(f"malformed sha256 for image {self.image_id!r}")
        if self.image_id != self.sha256[:16]:
            raise ValidationError(
                f"image_id {self.image_id!r} is not the first 16 hex chars of its sha256"
            )

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "uri": self.uri,
            "sha256": self.sha256,
            "source": self.source,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRef":
        try:
            return cls(
                image_id=d["image_id"],
                uri=d["uri"],
                sha256=d["sha256"],
                source=d.get("source", ""),
                width=d.get("width"),
                height=d.get("height"),
            )
        except KeyError as exc:
            raise ValidationError(f"malformed image record: missing {exc}") from exc


@dataclass(frozen=True)
class GenSpec:
    per_image: int = 5
    option_count: int = 4
    max_gen_tokens: int = 1024
    template_body: str = GEN_TEMPLATE_BODY

    def __post_init__(self):
        if self.per_image < 1:
            raise ValidationError("per_image must be >= 1")
        if not (2 <= self.option_count <= 8):
            raise ValidationError("option_count must be in [2, 8]")


@dataclass(frozen=True)
class EmbeddingRecord:
    image_id: str
    vector: tuple[float, ...]

    def __post_init__(self):
        norm = float(np.linalg.norm(np.asarray(self.vector, dtype=np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(
                f"embedding for {self.image_id!r} is not unit-norm (|v|={norm:.8f})"
            )

    @property
    def dim(self) -> int:
        return len(self.vector)

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingRecord":
        try:
            return cls(image_id=d["image_id"], vector=tuple(d["vector"]))
        except KeyError as exc:
            raise ValidationError(f"malformed embedding record: missing {exc}") from exc


_BLOCK_START = re.compile(r"^\s*\d+[.)]\s*(.+)$")
_OPTION = re.compile(r"^\s*([A-H])[.)]\s*(.+)$")
_ANSWER = re.compile(r"^\s*Answer:\s*\(?([A-H])\)?\s*$", re.I)


def parse_generated_mcqs(
    text: str, image_id: str, spec: GenSpec, provenance: str = ""
) -> tuple[list[MCQ], list[dict]]:
    """Parse the pinned numbered-block layout into validated MCQs.

    Returns (accepted, rejections); each rejection carries a reason code.
    """
    blocks: list[list[str]] = []
    current: list[str] | None = None
    for line in text.splitlines():
        if _BLOCK_START.match(line):
            current = [line]
            blocks.append(current)
        elif current is not None and line.strip():
            current.append(line)
    accepted: list[MCQ] = []
    rejections: list[dict] = []
    for idx, block in enumerate(blocks):
        if len(accepted) >= spec.per_image:
            break
        stem = _BLOCK_START.match(block[0]).group(1).strip()
        options: list[str] = []
        answer_label: str | None = None
        for line in block[1:]:
            ans = _ANSWER.match(line)
            if ans:
                answer_label = ans.group(1).upper()
                continue
            opt = _OPTION.match(line)
            if opt:
                options.append(opt.group(2).strip())
        reason = None
        if answer_label is None:
            reason = "missing_answer_line"
        elif len(options) != spec.option_count:
            reason = f"expected_{spec.option_count}_options_got_{len(options)}"
        elif LABELS.index(answer_label) >= len(options):
            reason = "answer_label_out_of_range"
        if reason is None:
            try:
                accepted.append(
                    MCQ(
                        id=f"{image_id}-q{idx}",
                        image_id=image_id,
                        stem=stem,
                        options=tuple(options),
                        correct_index=LABELS.index(answer_label),
                        provenance=provenance,
                    )
                )
            except ValidationError as exc:
                reason = f"invalid_mcq: {exc}"
        if reason is not None:
            rejections.append({"image_id": image_id, "block": idx, "reason": reason})
    return accepted, rejections


def generate_qa(
    image: ImageRef, spec: GenSpec, generator: Backend, seed: int = 0
) -> tuple[list[MCQ], list[dict]]:
    """Ask a vision-capable backend for questions about one image."""
    if not generator.profile.vision_capable:
        raise ValidationError(
            f"generator {generator.profile.name!r} is not vision-capable"
        )
    prompt = spec.template_body.replace("{per_image}", str(spec.per_image)).replace(
        "{option_count}", str(spec.option_count)
    )
    exchange = generator.complete(
        ChatRequest(
            prompt=prompt,
            image_uri=image.uri,
            temperature=generator.profile.temperature,
            max_tokens=spec.max_gen_tokens,
            seed=seed,
        )
    )
    mcqs, rejections = parse_generated_mcqs(
        exchange.response_text, image.image_id, spec, provenance=generator.profile.model
    )
    if not mcqs:
        raise GenerationError(f"no parseable questions for image {image.image_id!r}")
    return mcqs, rejections


def generate_qa_batch(
    images: list[ImageRef], spec: GenSpec, generator: Backend, seed: int = 0
) -> tuple[list[MCQ], list[dict], list[dict]]:
    """Fan generation out over images; failed images are logged, not fatal."""

    def run(image: ImageRef):
        return generate_qa(image, spec, generator, seed=seed)

    mcqs: list[MCQ] = []
    rejections: list[dict] = []
    failures: list[dict] = []
    workers = min(max(len(images), 1), generator.profile.in_flight_limit)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(run, img): img for img in images}
        results = {}
        for fut, img in futures.items():
            try:
                results[img.image_id] = fut.result()
            except (GenerationError, BackendError) as exc:
                failures.append({"image_id": img.image_id, "error": str(exc)})
    for img in images:
        if img.image_id in results:
            got, rej = results[img.image_id]
            mcqs.extend(got)
            rejections.extend(rej)
    return mcqs, rejections, failures


def _as_matrix(records: list[EmbeddingRecord]) -> np.ndarray:
    dims = {r.dim for r in records}
    if len(dims) > 1:
        raise ValidationError(f"mixed embedding dimensions: {sorted(dims)}")
    return np.asarray([r.vector for r in records], dtype=np.float64)


def dedup_by_embedding(
    records: list[EmbeddingRecord], threshold: float
) -> tuple[set[str], list[dict]]:
    """Greedy keep-first dedup over records sorted by image_id.

    A record is dropped iff its cosine similarity to some already-kept
    record is >= threshold. Returns (kept ids, duplicate-pair log).
    """
    if not (0.0 < threshold <= 1.0):
        raise ValidationError("threshold must be in (0, 1]")
    ordered = sorted(records, key=lambda r: r.image_id)
    if not ordered:
        return set(), []
    matrix = _as_matrix(ordered)
    kept_idx: list[int] = []
    kept_ids: set[str] = set()
    duplicates: list[dict] = []
    for i, record in enumerate(ordered):
        if kept_idx:
            sims = matrix[kept_idx] @ matrix[i]
            worst = int(np.argmax(sims))
            if float(sims[worst]) >= threshold:
                duplicates.append(
                    {
                        "image_id": record.image_id,
                        "duplicate_of": ordered[kept_idx[worst]].image_id,
                        "similarity": float(sims[worst]),
                    }
                )
                continue
        kept_idx.append(i)
        kept_ids.add(record.image_id)
    return kept_ids, duplicates


def flag_benchmark_overlap(
    records: list[EmbeddingRecord],
    benchmark: list[EmbeddingRecord],
    threshold: float,
) -> set[str]:
    """Flag records whose max cosine similarity to any benchmark vector >= threshold."""
    if not records or not benchmark:
        return set()
    matrix = _as_matrix(records)
    bench = _as_matrix(benchmark)
    if matrix.shape[1] != bench.shape[1]:
        raise ValidationError(
            f"embedding dim {matrix.shape[1]} != benchmark dim {bench.shape[1]}"
        )
    max_sims = (matrix @ bench.T).max(axis=1)
    return {
        record.image_id
        for record, sim in zip(records, max_sims)
        if float(sim) >= threshold
    }
