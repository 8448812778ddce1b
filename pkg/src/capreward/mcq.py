"""Multiple-choice questions: shuffling, prompt rendering, parsing, grading.

A question's options are permuted with a seeded Fisher-Yates shuffle (see
``seeding``) so the correct answer's position carries no signal, while the
ground-truth option is tracked through the permutation. Raw model answers
are reduced to a label by a three-tier parse; an unparseable answer always
grades as wrong.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ConfigError, ValidationError
from .seeding import permutation

LABELS = "ABCDEFGH"
MIN_OPTIONS = 2
MAX_OPTIONS = 8


def normalize_text(text: str) -> str:
    """Case-fold, trim, and collapse internal whitespace."""
    return " ".join(text.split()).casefold()


@dataclass(frozen=True)
class MCQ:
    """One multiple-choice question with a single correct option."""

    id: str
    image_id: str
    stem: str
    options: tuple[str, ...]
    correct_index: int
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        n = len(self.options)
        if not (MIN_OPTIONS <= n <= MAX_OPTIONS):
            raise ValidationError(
                f"mcq {self.id!r}: option count {n} outside [{MIN_OPTIONS}, {MAX_OPTIONS}]"
            )
        if not (0 <= self.correct_index < n):
            raise ValidationError(
                f"mcq {self.id!r}: correct_index {self.correct_index} out of range"
            )
        normalized = [normalize_text(o) for o in self.options]
        if any(not o for o in normalized):
            raise ValidationError(f"mcq {self.id!r}: blank option text")
        if len(set(normalized)) != n:
            raise ValidationError(f"mcq {self.id!r}: duplicate option texts")

    @property
    def correct_text(self) -> str:
        return self.options[self.correct_index]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_id": self.image_id,
            "stem": self.stem,
            "options": list(self.options),
            "correct_index": self.correct_index,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MCQ":
        try:
            return cls(
                id=d["id"],
                image_id=d["image_id"],
                stem=d["stem"],
                options=tuple(d["options"]),
                correct_index=int(d["correct_index"]),
                provenance=d.get("provenance", ""),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed mcq record: {exc}") from exc


@dataclass(frozen=True)
class ShuffledMCQ:
    """A presentation instance of an MCQ under a seeded option permutation.

    ``permutation[k]`` is the original option index shown at display
    position k, so ``labeled_options[k] = (LABELS[k], options[permutation[k]])``.
    """

    mcq_id: str
    stem: str
    permutation: tuple[int, ...]
    labeled_options: tuple[tuple[str, str], ...]
    correct_label: str
    instance_seed: int

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.labeled_options)

    def option_text(self, label: str) -> str:
        for lab, text in self.labeled_options:
            if lab == label:
                return text
        raise KeyError(label)


@dataclass(frozen=True)
class AnswerRecord:
    """Outcome of one answered question instance."""

    mcq_id: str
    instance_seed: int
    raw_response: str
    parsed_label: str | None
    correct: bool
    parse_status: str  # clean | fallback_text_match | unparseable

    def to_dict(self) -> dict:
        return {
            "mcq_id": self.mcq_id,
            "instance_seed": self.instance_seed,
            "raw_response": self.raw_response,
            "parsed_label": self.parsed_label,
            "correct": self.correct,
            "parse_status": self.parse_status,
        }


DEFAULT_ANSWER_TEMPLATE_BODY = """\
You will be given a description of an image, followed by a multiple-choice
question about that image. Answer the question using only the information in
the description.

Description:
{caption}

Question:
{stem}

Options:
{options}

Reply with the letter of the best option, in the form "Answer: <letter>".
"""


@dataclass(frozen=True)
class PromptTemplate:
    """Answer-prompt template with {caption}, {stem}, {options} slots."""

    name: str
    body: str

    def __post_init__(self):
        for placeholder in ("{caption}", "{stem}", "{options}"):
            if self.body.count(placeholder) != 1:
                raise ConfigError(
                    f"template {self.name!r}: placeholder {placeholder} must occur exactly once"
                )


DEFAULT_ANSWER_TEMPLATE = PromptTemplate(name="default", body=DEFAULT_ANSWER_TEMPLATE_BODY)


def shuffle_mcq(mcq: MCQ, instance_seed: int) -> ShuffledMCQ:
    """Deterministically shuffle an MCQ's options for one presentation."""
    perm = permutation(len(mcq.options), instance_seed)
    labeled = tuple(
        (LABELS[pos], mcq.options[orig]) for pos, orig in enumerate(perm)
    )
    correct_label = LABELS[perm.index(mcq.correct_index)]
    return ShuffledMCQ(
        mcq_id=mcq.id,
        stem=mcq.stem,
        permutation=tuple(perm),
        labeled_options=labeled,
        correct_label=correct_label,
        instance_seed=instance_seed,
    )


def render_options(smcq: ShuffledMCQ) -> str:
    return "\n".join(f"{label}. {text}" for label, text in smcq.labeled_options)


def render_answer_prompt(
    caption: str,
    smcq: ShuffledMCQ,
    template: PromptTemplate = DEFAULT_ANSWER_TEMPLATE,
) -> str:
    """Substitute caption/stem/options into the template. Byte-deterministic."""
    return (
        template.body.replace("{caption}", caption)
        .replace("{stem}", smcq.stem)
        .replace("{options}", render_options(smcq))
    )


def parse_answer(raw: str, smcq: ShuffledMCQ) -> tuple[str | None, str]:
    """Reduce a raw answer to a label, or declare it unparseable.

    Tier 1 (clean): last standalone occurrence of a valid label letter,
    bare or wrapped in common markers ("Answer: B", "(B)", "B.").
    Tier 2 (fallback_text_match): the unique option whose full normalized
    text occurs in the response.
    Tier 3: unparseable.
    """
    valid = "".join(smcq.labels)
    standalone = re.findall(rf"(?<![A-Za-z0-9])([{valid}])(?![A-Za-z0-9])", raw)
    if standalone:
        return standalone[-1], "clean"

    norm_raw = normalize_text(raw)
    matches = [
        label
        for label, text in smcq.labeled_options
        if normalize_text(text) in norm_raw
    ]
    if len(matches) == 1:
        return matches[0], "fallback_text_match"
    return None, "unparseable"


def grade(parsed_label: str | None, smcq: ShuffledMCQ) -> int:
    """Exact-match reward: 1 iff the parsed label is the correct label."""
    return 1 if parsed_label is not None and parsed_label == smcq.correct_label else 0


def answer_and_grade(raw: str, smcq: ShuffledMCQ) -> AnswerRecord:
    """Parse and grade one raw response into an AnswerRecord."""
    label, status = parse_answer(raw, smcq)
    return AnswerRecord(
        mcq_id=smcq.mcq_id,
        instance_seed=smcq.instance_seed,
        raw_response=raw,
        parsed_label=label,
        correct=bool(grade(label, smcq)),
        parse_status=status,
    )
