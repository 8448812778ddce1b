"""Round planning and caption scoring against the keyword-mock oracle."""

from __future__ import annotations

import random

import pytest

from capreward.backend import Backend, BackendProfile, ScriptedTransport
from capreward.errors import EmptyQuestionSetError, ScoringError, ValidationError
from capreward.reward import (
    COVERAGE_FIRST,
    WITH_REPLACEMENT,
    CaptionSample,
    RewardConfig,
    RewardReport,
    plan_rounds,
    score_caption,
    score_group,
)
from oracles import (
    fresh_keyword_backend,
    make_mcq,
    oracle_mock_correct,
    oracle_reward_coverage_full,
)


class TestPlanRounds:
    def test_coverage_first_no_repeats_when_n_below_m(self):
        ids = [f"q{i}" for i in range(5)]
        for seed in range(1000):
            config = RewardConfig(n_rounds=4, global_seed=seed)
            plan = plan_rounds(ids, config, "cap")
            chosen = [qid for qid, _ in plan]
            assert len(set(chosen)) == 4

    def test_coverage_first_full_cycles(self):
        config = RewardConfig(n_rounds=4, global_seed=1)
        plan = plan_rounds(["q0", "q1"], config, "cap")
        chosen = [qid for qid, _ in plan]
        assert sorted(chosen) == ["q0", "q0", "q1", "q1"]

    def test_single_question_repeats_with_distinct_seeds(self):
        for mode in (COVERAGE_FIRST, WITH_REPLACEMENT):
            config = RewardConfig(n_rounds=3, sampling_mode=mode, global_seed=9)
            plan = plan_rounds(["q0"], config, "cap")
            assert [qid for qid, _ in plan] == ["q0", "q0", "q0"]
            seeds = [seed for _, seed in plan]
            assert len(set(seeds)) == 3

    def test_empty_question_set(self):
        with pytest.raises(EmptyQuestionSetError):
            plan_rounds([], RewardConfig(), "cap")

    def test_plan_is_deterministic(self):
        ids = [f"q{i}" for i in range(7)]
        config = RewardConfig(n_rounds=5, global_seed=3)
        assert plan_rounds(ids, config, "cap") == plan_rounds(ids, config, "cap")

    def test_with_replacement_draws_uniformly(self):
        ids = [f"q{i}" for i in range(4)]
        counts = {qid: 0 for qid in ids}
        for seed in range(2000):
            config = RewardConfig(
                n_rounds=1, sampling_mode=WITH_REPLACEMENT, global_seed=seed
            )
            [(qid, _)] = plan_rounds(ids, config, "cap")
            counts[qid] += 1
        for count in counts.values():
            assert abs(count / 2000 - 0.25) < 0.05

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            RewardConfig(n_rounds=0)
        with pytest.raises(ValidationError):
            RewardConfig(sampling_mode="bogus")


def answerable_fixture(n_answerable: int, image_id: str = "img"):
    """5 questions; the caption carries GT tokens for the first n_answerable
    and a wrong-option token for the rest (so the mock answers those wrong
    deterministically, independent of the shuffle)."""
    questions = [make_mcq(image_id, i) for i in range(5)]
    parts = [q.correct_text for q in questions[:n_answerable]]
    parts += [q.options[(q.correct_index + 1) % len(q.options)]
              for q in questions[n_answerable:]]
    caption = CaptionSample(
        caption_id="c0", image_id=image_id, text="A scene with " + " and ".join(parts)
    )
    return caption, questions


class TestScoreCaption:
    def test_three_of_five_answerable(self):
        caption, questions = answerable_fixture(3)
        config = RewardConfig(n_rounds=5, global_seed=11)
        report = score_caption(caption, questions, config, fresh_keyword_backend())
        assert report.reward == 0.6

    def test_round_grades_mean(self):
        caption, questions = answerable_fixture(3)
        config = RewardConfig(n_rounds=4, global_seed=2)
        report = score_caption(caption, questions, config, fresh_keyword_backend())
        assert report.reward == sum(1 for r in report.rounds if r.correct) / 4
        assert len(report.rounds) == 4

    def test_empty_caption_seed_with_zero_reward(self):
        # With no keyword matches the mock answers the first label; seed 3
        # happens to put the ground truth elsewhere in every round.
        questions = [make_mcq("img", i) for i in range(5)]
        caption = CaptionSample(caption_id="c0", image_id="img", text="")
        config = RewardConfig(n_rounds=5, global_seed=3)
        oracle = oracle_reward_coverage_full("", questions, 3, "c0")
        report = score_caption(caption, questions, config, fresh_keyword_backend())
        assert report.reward == oracle == 0.0

    def test_oracle_equivalence_random_fixtures(self):
        rng = random.Random(0)
        for case in range(50):
            questions = [make_mcq(f"img{case}", i) for i in range(5)]
            n_hit = rng.randint(0, 5)
            hit = rng.sample(questions, n_hit)
            caption_text = " ".join(q.correct_text for q in hit)
            caption = CaptionSample(
                caption_id=f"c{case}", image_id=f"img{case}", text=caption_text
            )
            config = RewardConfig(n_rounds=5, global_seed=case)
            report = score_caption(caption, questions, config, fresh_keyword_backend())
            oracle = oracle_reward_coverage_full(
                caption_text, questions, case, caption.caption_id
            )
            assert report.reward == oracle

    def test_reward_times_n_is_integer(self):
        caption, questions = answerable_fixture(2)
        for n in (1, 3, 4, 7):
            config = RewardConfig(n_rounds=n, global_seed=1)
            report = score_caption(caption, questions, config, fresh_keyword_backend())
            assert report.reward * n == int(report.reward * n)
            assert 0.0 <= report.reward <= 1.0

    def test_monotonicity_under_appended_ground_truth(self):
        rng = random.Random(3)
        for case in range(30):
            questions = [make_mcq(f"im{case}", i) for i in range(5)]
            base_text = " ".join(
                q.correct_text for q in rng.sample(questions, rng.randint(0, 3))
            )
            target = rng.choice(questions)
            config = RewardConfig(n_rounds=5, global_seed=case)
            before = score_caption(
                CaptionSample("c", f"im{case}", base_text), questions, config,
                fresh_keyword_backend(),
            ).reward
            after = score_caption(
                CaptionSample("c", f"im{case}", base_text + " " + target.correct_text),
                questions, config, fresh_keyword_backend(),
            ).reward
            assert after >= before

    def test_scheduling_independence(self):
        caption, questions = answerable_fixture(2)
        config = RewardConfig(n_rounds=8, global_seed=4)
        sequential = score_caption(
            caption, questions, config, fresh_keyword_backend(in_flight_limit=1)
        )
        concurrent = score_caption(
            caption, questions, config, fresh_keyword_backend(in_flight_limit=8)
        )
        assert sequential == concurrent

    def test_mismatched_image_id_rejected(self):
        caption, questions = answerable_fixture(2)
        stray = make_mcq("other", 9)
        with pytest.raises(ValidationError):
            score_caption(caption, questions + [stray], RewardConfig(),
                          fresh_keyword_backend())

    def test_backend_failure_aborts_score(self):
        caption, questions = answerable_fixture(2)
        profile = BackendProfile(name="dead", model="dead")
        transport = ScriptedTransport([])  # every request is a scripted miss
        backend = Backend(profile, transport=transport)
        with pytest.raises(ScoringError) as excinfo:
            score_caption(caption, questions, RewardConfig(n_rounds=3), backend)
        assert excinfo.value.caption_id == "c0"
        assert 0 <= excinfo.value.round_index < 3


class TestScoreGroup:
    def test_degenerate_group(self):
        caption, questions = answerable_fixture(2)
        reports, advantage = score_group(
            [caption], questions, RewardConfig(global_seed=1), fresh_keyword_backend()
        )
        assert advantage.advantages == (0.0,)

    def test_group_matches_per_caption_scores(self):
        _, questions = answerable_fixture(0)
        captions = [
            CaptionSample(f"c{i}", "img",
                          " ".join(q.correct_text for q in questions[:i]),
                          rollout_index=i)
            for i in range(4)
        ]
        config = RewardConfig(n_rounds=5, global_seed=6)
        reports, advantage = score_group(
            captions, questions, config, fresh_keyword_backend()
        )
        solo = [
            score_caption(c, questions, config, fresh_keyword_backend()).reward
            for c in captions
        ]
        assert [r.reward for r in reports] == solo
        assert advantage.rewards == tuple(solo)

    def test_rerun_identical(self):
        _, questions = answerable_fixture(0)
        captions = [
            CaptionSample(f"c{i}", "img", questions[i].correct_text, rollout_index=i)
            for i in range(3)
        ]
        config = RewardConfig(n_rounds=4, global_seed=8)
        first = score_group(captions, questions, config, fresh_keyword_backend())
        second = score_group(captions, questions, config, fresh_keyword_backend())
        assert first == second

    def test_mixed_image_ids_rejected(self):
        _, questions = answerable_fixture(0)
        captions = [
            CaptionSample("c0", "img", "x", rollout_index=0),
            CaptionSample("c1", "other", "x", rollout_index=1),
        ]
        with pytest.raises(ValidationError):
            score_group(captions, questions, RewardConfig(), fresh_keyword_backend())

    def test_results_ordered_by_rollout_index(self):
        _, questions = answerable_fixture(0)
        captions = [
            CaptionSample("late", "img", "x", rollout_index=1),
            CaptionSample("early", "img", "y", rollout_index=0),
        ]
        reports, _ = score_group(
            captions, questions, RewardConfig(global_seed=2), fresh_keyword_backend()
        )
        assert [r.caption_id for r in reports] == ["early", "late"]
