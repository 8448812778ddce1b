"""Group-relative advantage normalization over a reward vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# Guards division when the group std is tiny but non-zero; unit tests use 0.
DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class GroupAdvantage:
    """Rewards of one rollout group with mean/std-normalized advantages.

    std is the population standard deviation: the group is the whole
    population being normalized. A zero-variance group (including G=1)
    short-circuits to all-zero advantages.
    """

    group_id: str
    rewards: tuple[float, ...]
    mean: float
    std: float
    advantages: tuple[float, ...]
    epsilon: float

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "rewards": list(self.rewards),
            "mean": self.mean,
            "std": self.std,
            "advantages": list(self.advantages),
            "epsilon": self.epsilon,
        }


def compute_group_advantages(
    rewards, epsilon: float = DEFAULT_EPSILON, group_id: str = ""
) -> GroupAdvantage:
    """Normalize rewards by group mean and population std."""
    vec = np.asarray(list(rewards), dtype=np.float64)
    if vec.size == 0:
        raise ValidationError("reward vector must be non-empty")
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    mean = float(vec.mean())
    # A constant vector is exactly zero-variance; computing its std naively
    # can leave rounding noise that would leak into the advantages.
    if bool(np.all(vec == vec[0])):
        std = 0.0
    else:
        std = float(vec.std(ddof=0))
    if std == 0.0:
        advantages = tuple(0.0 for _ in range(vec.size))
    else:
        advantages = tuple(float(a) for a in (vec - mean) / (std + epsilon))
    return GroupAdvantage(
        group_id=group_id,
        rewards=tuple(float(r) for r in vec),
        mean=mean,
        std=std,
        advantages=advantages,
        epsilon=epsilon,
    )
