"""Generation parsing, embedding dedup, and benchmark-overlap flagging."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import pytest

from capreward.backend import Backend, BackendProfile, ScriptedTransport
from capreward.curation import (
    EmbeddingRecord,
    GenSpec,
    ImageRef,
    dedup_by_embedding,
    flag_benchmark_overlap,
    generate_qa,
    parse_generated_mcqs,
)
from capreward.errors import GenerationError, ValidationError


def image_ref(tag: str) -> ImageRef:
    digest = hashlib.sha256(tag.encode()).hexdigest()
    return ImageRef(image_id=digest[:16], uri=f"image://{tag}", sha256=digest)


def well_formed_blocks(n: int = 5) -> str:
    blocks = []
    for i in range(n):
        blocks.append(
            f"{i + 1}. What is object {i}?\n"
            f"A. thing-{i}-a\nB. thing-{i}-b\nC. thing-{i}-c\nD. thing-{i}-d\n"
            f"Answer: B"
        )
    return "\n\n".join(blocks)


class TestImageRef:
    def test_valid(self):
        ref = image_ref("x")
        assert ref.image_id == ref.sha256[:16]

    def test_id_must_match_digest_prefix(self):
        digest = hashlib.sha256(b"x").hexdigest()
        with pytest.raises(ValidationError):
            ImageRef(image_id="deadbeefdeadbeef", uri="u", sha256=digest)

    def test_malformed_sha(self):
        with pytest.raises(ValidationError):
            ImageRef(image_id="ab", uri="u", sha256="zzz")


class TestParseGeneratedMcqs:
    def test_five_well_formed_blocks(self):
        mcqs, rejections = parse_generated_mcqs(
            well_formed_blocks(), "img1", GenSpec(), provenance="gen-model"
        )
        assert len(mcqs) == 5
        assert not rejections
        for mcq in mcqs:
            assert len(mcq.options) == 4
            assert mcq.correct_index == 1
            assert mcq.provenance == "gen-model"

    def test_duplicate_option_block_rejected(self):
        text = well_formed_blocks(4) + (
            "\n\n5. Broken one?\nA. same\nB. same\nC. other\nD. more\nAnswer: A"
        )
        mcqs, rejections = parse_generated_mcqs(text, "img1", GenSpec())
        assert len(mcqs) == 4
        assert len(rejections) == 1
        assert "invalid_mcq" in rejections[0]["reason"]

    def test_missing_answer_line_rejected(self):
        text = "1. Q?\nA. a\nB. b\nC. c\nD. d"
        mcqs, rejections = parse_generated_mcqs(text, "img1", GenSpec())
        assert not mcqs
        assert rejections[0]["reason"] == "missing_answer_line"

    def test_wrong_option_count_rejected(self):
        text = "1. Q?\nA. a\nB. b\nAnswer: A"
        mcqs, rejections = parse_generated_mcqs(text, "img1", GenSpec(option_count=4))
        assert not mcqs
        assert "expected_4_options" in rejections[0]["reason"]

    def test_prose_without_blocks(self):
        mcqs, rejections = parse_generated_mcqs(
            "The image shows a lovely meadow.", "img1", GenSpec()
        )
        assert not mcqs and not rejections

    def test_caps_at_per_image(self):
        mcqs, _ = parse_generated_mcqs(well_formed_blocks(8), "img1", GenSpec(per_image=5))
        assert len(mcqs) == 5


class TestGenerateQa:
    def gen_backend(self, response: str) -> Backend:
        return Backend(
            BackendProfile(name="gen", model="gen-model", vision_capable=True),
            transport=ScriptedTransport([{"match": {}, "response": response}]),
        )

    def test_scripted_generation(self):
        mcqs, rejections = generate_qa(
            image_ref("a"), GenSpec(), self.gen_backend(well_formed_blocks())
        )
        assert len(mcqs) == 5
        image_id = image_ref("a").image_id
        assert all(m.image_id == image_id for m in mcqs)

    def test_prose_raises_generation_error(self):
        with pytest.raises(GenerationError):
            generate_qa(image_ref("a"), GenSpec(), self.gen_backend("just prose"))

    def test_text_only_backend_rejected(self):
        backend = Backend(
            BackendProfile(name="gen", vision_capable=False),
            transport=ScriptedTransport([{"match": {}, "response": "x"}]),
        )
        with pytest.raises(ValidationError):
            generate_qa(image_ref("a"), GenSpec(), backend)


def unit_vector(rng: random.Random, dim: int) -> tuple[float, ...]:
    v = np.array([rng.gauss(0, 1) for _ in range(dim)])
    return tuple(v / np.linalg.norm(v))


def brute_force_dedup(records, threshold):
    ordered = sorted(records, key=lambda r: r.image_id)
    kept = []
    for record in ordered:
        v = np.array(record.vector)
        if all(float(np.dot(v, np.array(k.vector))) < threshold for k in kept):
            kept.append(record)
    return {r.image_id for r in kept}


class TestDedup:
    def test_identical_vectors_second_dropped(self):
        vec = tuple(np.array([1.0, 0.0, 0.0]))
        records = [
            EmbeddingRecord("aaa", vec),
            EmbeddingRecord("bbb", vec),
        ]
        kept, duplicates = dedup_by_embedding(records, 0.99)
        assert kept == {"aaa"}
        assert duplicates[0]["image_id"] == "bbb"
        assert duplicates[0]["duplicate_of"] == "aaa"

    def test_orthogonal_vectors_both_kept(self):
        records = [
            EmbeddingRecord("aaa", (1.0, 0.0)),
            EmbeddingRecord("bbb", (0.0, 1.0)),
        ]
        kept, duplicates = dedup_by_embedding(records, 0.92)
        assert kept == {"aaa", "bbb"}
        assert not duplicates

    def test_matches_brute_force_oracle(self):
        rng = random.Random(1)
        records = [
            EmbeddingRecord(f"id{i:03d}", unit_vector(rng, 3)) for i in range(10)
        ]
        for threshold in (0.5, 0.9, 0.99):
            kept, _ = dedup_by_embedding(records, threshold)
            assert kept == brute_force_dedup(records, threshold)

    def test_input_order_independent(self):
        rng = random.Random(2)
        records = [
            EmbeddingRecord(f"id{i:03d}", unit_vector(rng, 4)) for i in range(12)
        ]
        shuffled = list(records)
        rng.shuffle(shuffled)
        assert dedup_by_embedding(records, 0.8)[0] == dedup_by_embedding(shuffled, 0.8)[0]

    def test_non_unit_vector_rejected(self):
        with pytest.raises(ValidationError):
            EmbeddingRecord("aaa", (1.0, 1.0))

    def test_dim_mismatch_rejected(self):
        records = [
            EmbeddingRecord("aaa", (1.0, 0.0)),
            EmbeddingRecord("bbb", (0.0, 0.0, 1.0)),
        ]
        with pytest.raises(ValidationError):
            dedup_by_embedding(records, 0.9)

    def test_bad_threshold_rejected(self):
        with pytest.raises(ValidationError):
            dedup_by_embedding([], 0.0)


class TestBenchmarkOverlap:
    def test_exact_benchmark_vector_flagged(self):
        vec = (1.0, 0.0)
        flagged = flag_benchmark_overlap(
            [EmbeddingRecord("aaa", vec)], [EmbeddingRecord("bench", vec)], 0.92
        )
        assert flagged == {"aaa"}

    def test_empty_benchmark_flags_nothing(self):
        assert flag_benchmark_overlap([EmbeddingRecord("aaa", (1.0, 0.0))], [], 0.9) == set()

    def test_matches_brute_force(self):
        rng = random.Random(3)
        records = [EmbeddingRecord(f"r{i:02d}", unit_vector(rng, 4)) for i in range(20)]
        benchmark = [EmbeddingRecord(f"b{i:02d}", unit_vector(rng, 4)) for i in range(5)]
        threshold = 0.6
        flagged = flag_benchmark_overlap(records, benchmark, threshold)
        expected = set()
        for r in records:
            for b in benchmark:
                if float(np.dot(r.vector, b.vector)) >= threshold:
                    expected.add(r.image_id)
        assert flagged == expected

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            flag_benchmark_overlap(
                [EmbeddingRecord("aaa", (1.0, 0.0))],
                [EmbeddingRecord("bbb", (0.0, 0.0, 1.0))],
                0.9,
            )
