"""Shuffle, render, parse, and grade contracts."""

from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capreward.errors import ConfigError, ValidationError
from capreward.mcq import (
    MCQ,
    DEFAULT_ANSWER_TEMPLATE,
    PromptTemplate,
    grade,
    parse_answer,
    render_answer_prompt,
    shuffle_mcq,
)
from oracles import make_mcq, oracle_permutation, random_mcq


def four_option_mcq() -> MCQ:
    return MCQ(
        id="q1",
        image_id="img",
        stem="What color is the frisbee?",
        options=("red frisbee", "blue ball", "green kite", "yellow sun"),
        correct_index=0,
    )


class TestMCQValidation:
    def test_option_count_bounds(self):
        with pytest.raises(ValidationError):
            MCQ(id="q", image_id="i", stem="s", options=("one",), correct_index=0)
        with pytest.raises(ValidationError):
            MCQ(id="q", image_id="i", stem="s",
                options=tuple(str(i) for i in range(9)), correct_index=0)

    def test_correct_index_range(self):
        with pytest.raises(ValidationError):
            MCQ(id="q", image_id="i", stem="s", options=("a", "b"), correct_index=2)

    def test_duplicate_options_after_normalization(self):
        with pytest.raises(ValidationError):
            MCQ(id="q", image_id="i", stem="s",
                options=("Red  Fox", "red fox"), correct_index=0)

    def test_blank_option_rejected(self):
        with pytest.raises(ValidationError):
            MCQ(id="q", image_id="i", stem="s", options=("a", "   "), correct_index=0)


class TestShuffle:
    def test_determinism(self):
        mcq = four_option_mcq()
        assert shuffle_mcq(mcq, 12345) == shuffle_mcq(mcq, 12345)

    def test_two_option_ground_truth_tracking(self):
        mcq = MCQ(id="q", image_id="i", stem="s", options=("X", "Y"), correct_index=0)
        for seed in range(50):
            smcq = shuffle_mcq(mcq, seed)
            assert smcq.correct_label in ("A", "B")
            assert smcq.option_text(smcq.correct_label) == "X"

    def test_matches_documented_permutation(self):
        mcq = four_option_mcq()
        for seed in (0, 1, 999, 2**63):
            assert list(shuffle_mcq(mcq, seed).permutation) == oracle_permutation(4, seed)

    def test_permutation_frequencies_uniform(self):
        mcq = four_option_mcq()
        counts = {p: 0 for p in itertools.permutations(range(4))}
        n_seeds = 10_000
        for seed in range(n_seeds):
            counts[tuple(shuffle_mcq(mcq, seed).permutation)] += 1
        for perm, count in counts.items():
            assert count > 0, f"permutation {perm} never observed"
            assert abs(count / n_seeds - 1 / 24) <= 0.01

    @given(st.integers(min_value=0, max_value=2**64 - 1), st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_bijection_and_conservation(self, seed, mcq_key):
        mcq = random_mcq(random.Random(mcq_key))
        smcq = shuffle_mcq(mcq, seed)
        assert sorted(text for _, text in smcq.labeled_options) == sorted(mcq.options)
        assert smcq.option_text(smcq.correct_label) == mcq.options[mcq.correct_index]


class TestRender:
    def test_contains_all_parts(self):
        smcq = shuffle_mcq(four_option_mcq(), 7)
        prompt = render_answer_prompt("a red frisbee on grass", smcq)
        assert "a red frisbee on grass" in prompt
        assert "What color is the frisbee?" in prompt
        labeled_lines = [
            line for line in prompt.splitlines()
            if line[:3] in ("A. ", "B. ", "C. ", "D. ")
        ]
        assert len(labeled_lines) == 4

    def test_empty_caption_renders(self):
        smcq = shuffle_mcq(four_option_mcq(), 7)
        prompt = render_answer_prompt("", smcq)
        assert "What color is the frisbee?" in prompt

    def test_byte_determinism(self):
        smcq = shuffle_mcq(four_option_mcq(), 7)
        assert render_answer_prompt("cap", smcq) == render_answer_prompt("cap", smcq)

    def test_template_missing_placeholder_rejected(self):
        with pytest.raises(ConfigError):
            PromptTemplate(name="bad", body="{caption} {stem}")
        with pytest.raises(ConfigError):
            PromptTemplate(name="bad", body="{caption} {stem} {options} {options}")


class TestParse:
    def setup_method(self):
        self.smcq = shuffle_mcq(four_option_mcq(), 3)

    def test_marker_rule(self):
        assert parse_answer("The answer is B.", self.smcq) == ("B", "clean")
        assert parse_answer("(B)", self.smcq) == ("B", "clean")
        assert parse_answer("Answer: B", self.smcq) == ("B", "clean")

    def test_unique_text_match(self):
        label, status = parse_answer("it must be the red frisbee", self.smcq)
        assert status == "fallback_text_match"
        assert self.smcq.option_text(label) == "red frisbee"

    def test_last_label_wins(self):
        assert parse_answer("could be A or C", self.smcq) == ("C", "clean")

    def test_unparseable(self):
        assert parse_answer("no idea", self.smcq) == (None, "unparseable")

    def test_invalid_letter_not_a_label(self):
        # E is outside the 4-option label set.
        assert parse_answer("E", self.smcq) == (None, "unparseable")

    def test_ambiguous_text_match_unparseable(self):
        label, status = parse_answer(
            "either red frisbee or blue ball", self.smcq
        )
        assert (label, status) == (None, "unparseable")


class TestGrade:
    def test_exact_match(self):
        smcq = shuffle_mcq(four_option_mcq(), 3)
        assert grade(smcq.correct_label, smcq) == 1
        wrong = next(l for l in smcq.labels if l != smcq.correct_label)
        assert grade(wrong, smcq) == 0
        assert grade(None, smcq) == 0

    def test_scripted_oracle_round_trip(self):
        # A scripted answerer emitting "Answer: <correct_label>" always grades 1.
        for seed in range(100):
            mcq = make_mcq("img", seed % 7, n_options=2 + seed % 7,
                           correct_index=seed % 2)
            smcq = shuffle_mcq(mcq, seed)
            label, status = parse_answer(f"Answer: {smcq.correct_label}", smcq)
            assert status == "clean"
            assert grade(label, smcq) == 1
