"""Caption-utility reward engine.

Scores image captions by how well a vision-free answerer solves
multiple-choice questions from the caption alone, normalizes rewards into
group-relative advantages, curates and leak-filters the question data, and
evaluates captioners with a decoupled two-stage VQA harness.
"""

__version__ = "0.1.0"

from .grpo import GroupAdvantage, compute_group_advantages
from .mcq import MCQ, AnswerRecord, PromptTemplate, ShuffledMCQ, grade, parse_answer, render_answer_prompt, shuffle_mcq
from .reward import CaptionSample, RewardConfig, RewardReport, plan_rounds, score_caption, score_group

__all__ = [
    "__version__",
    "MCQ",
    "ShuffledMCQ",
    "AnswerRecord",
    "PromptTemplate",
    "shuffle_mcq",
    "render_answer_prompt",
    "parse_answer",
    "grade",
    "GroupAdvantage",
    "compute_group_advantages",
    "RewardConfig",
    "CaptionSample",
    "RewardReport",
    "plan_rounds",
    "score_caption",
    "score_group",
]
