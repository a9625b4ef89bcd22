"""Verifier rewards and principle-group aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .canon import answers_match
from .policy import Completion

REWARD_MODES = ("piecewise", "additive")


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    correct_value: float = 0.9
    format_value: float = 0.1
    otherwise_value: float = 0.0
    mode: str = "piecewise"

    def __post_init__(self):
        if not self.correct_value >= self.format_value >= self.otherwise_value >= 0:
            raise RewardError("need correct_value >= format_value >= otherwise_value >= 0")
        if self.mode not in REWARD_MODES:
            raise RewardError(f"unknown reward mode {self.mode!r}")

    @property
    def max_reward(self) -> float:
        if self.mode == "additive":
            return self.correct_value + self.format_value
        return self.correct_value


def score(completion: Completion, answer: str, cfg: RewardConfig = RewardConfig()) -> float:
    """Verifier reward for one completion.

    ``piecewise`` returns exactly one of the three configured values; an answer
    only counts as correct when it was extracted from a well-formed output.
    ``additive`` returns ``correct_value * accuracy + format_value * format``.
    """
    fmt = bool(completion.format_ok)
    correct = fmt and answers_match(completion.decoded_answer, answer)
    if cfg.mode == "additive":
        return cfg.correct_value * correct + cfg.format_value * fmt
    if correct:
        return cfg.correct_value
    if fmt:
        return cfg.format_value
    return cfg.otherwise_value


def score_all(completions: Sequence[Completion], answer: str,
              cfg: RewardConfig = RewardConfig()) -> np.ndarray:
    return np.array([score(c, answer, cfg) for c in completions])


def mean_reward(rewards: Sequence[float]) -> float:
    if len(rewards) == 0:
        raise RewardError("mean_reward of an empty list")
    return float(sum(rewards) / len(rewards))


@dataclass(frozen=True)
class GroupRewards:
    principle_id: str
    per_problem: tuple[np.ndarray, ...]

    def __post_init__(self):
        arrs = tuple(np.asarray(r, dtype=float) for r in self.per_problem)
        if not arrs:
            raise RewardError("a principle group needs at least one problem")
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise RewardError("ragged group: every problem needs the same rollout count G")
        object.__setattr__(self, "per_problem", arrs)

    @property
    def G(self) -> int:
        return self.per_problem[0].shape[0]


def rankwise_aggregate(group: GroupRewards) -> np.ndarray:
    """Mean across problems of the g-th smallest reward, for each position g."""
    return np.sort(np.stack(group.per_problem), axis=1).mean(axis=0)


def ranks(rewards: np.ndarray) -> np.ndarray:
    """Rank of each rollout within its problem, ties broken by rollout index."""
    order = np.argsort(rewards, kind="stable")
    r = np.empty_like(order)
    r[order] = np.arange(len(rewards))
    return r


def assign_by_rank(group: GroupRewards, aggregated: np.ndarray | None = None
                   ) -> list[np.ndarray]:
    """Give every rollout the aggregated value at its own within-problem rank."""
    agg = rankwise_aggregate(group) if aggregated is None else aggregated
    return [agg[ranks(r)] for r in group.per_problem]


def index_mean(group: GroupRewards) -> list[np.ndarray]:
    """Mean-based reward: rollout g of every problem gets the mean over problems of rollout g."""
    m = np.stack(group.per_problem).mean(axis=0)
    return [m.copy() for _ in group.per_problem]


AGGREGATIONS = ("none", "mean", "rankwise")


def aggregate(group: GroupRewards, how: str) -> list[np.ndarray]:
    if how == "none":
        return [r.copy() for r in group.per_problem]
    if how == "mean":
        return index_mean(group)
    if how == "rankwise":
        return assign_by_rank(group)
    raise RewardError(f"unknown aggregation {how!r}")
