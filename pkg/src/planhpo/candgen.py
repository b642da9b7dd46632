"""Seed sets and their rollout-based refinement (First.k, Max.k, Last.k).

Each seed candidate gets a single rollout. Rollouts are ranked by the best
fantasized value they reach (the row rank), and the top ``k`` trajectories
yield the refined set:

* ``first_k``: the seed candidates themselves;
* ``max_k``: the step of each trajectory that reached its best value;
* ``last_k``: the final step of each trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ConfigError, frozen_array
from .policy import PolicyState, suggest_many
from .rollout import FantasyTrajectory

PROVENANCES = ("seed", "first_k", "max_k", "last_k")


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Candidates in unit-cube coordinates.

    ``source_ranks[i]`` is the 0-based row rank of the trajectory candidate
    ``i`` came from (empty for seed sets).
    """

    points: np.ndarray
    provenance: str = "seed"
    source_ranks: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", frozen_array(np.atleast_2d(self.points)))
        if len(self.points) == 0:
            raise ValueError("candidate sets must be non-empty")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.points[i]


@dataclass(frozen=True, eq=False)
class RankedRollouts:
    trajectories: tuple[FantasyTrajectory, ...]
    original_indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.trajectories)


def generate_seed_set(policy: PolicyState, n: int, rng: np.random.Generator | None = None,
                      dim: int | None = None) -> CandidateSet:
    """``n`` independent draws from the policy (duplicates allowed)."""
    if n < 1:
        raise ValueError("seed set size must be >= 1")
    if dim is None:
        if policy.gp is None:
            raise ValueError("dim is required when the policy has no surrogate")
        dim = policy.gp.dim
    return CandidateSet(suggest_many(policy, dim, n, rng), "seed")


def rank_rollouts(trajs: Sequence[FantasyTrajectory]) -> RankedRollouts:
    """Stable descending sort by best fantasized value; ties keep candidate order."""
    y_star = np.array([t.y_star for t in trajs])
    order = np.argsort(-y_star, kind="stable")
    return RankedRollouts(tuple(trajs[i] for i in order), tuple(int(i) for i in order))


def _check_k(k: int, available: int) -> None:
    if not 1 <= k <= available:
        raise ConfigError("k_refine", f"k={k} must lie in [1, {available}]")


def refine_first_k(ranked: RankedRollouts, seeds: CandidateSet, k: int) -> CandidateSet:
    _check_k(k, min(len(seeds), len(ranked)))
    idx = list(ranked.original_indices[:k])
    return CandidateSet(seeds.points[idx], "first_k", tuple(range(k)))


def refine_max_k(ranked: RankedRollouts, k: int) -> CandidateSet:
    _check_k(k, len(ranked))
    return CandidateSet(np.stack([t.best_x for t in ranked.trajectories[:k]]), "max_k", tuple(range(k)))


def refine_last_k(ranked: RankedRollouts, k: int) -> CandidateSet:
    _check_k(k, len(ranked))
    return CandidateSet(np.stack([t.last_x for t in ranked.trajectories[:k]]), "last_k", tuple(range(k)))


def refine(criterion: str, ranked: RankedRollouts, seeds: CandidateSet, k: int) -> CandidateSet:
    if criterion == "first_k":
        return refine_first_k(ranked, seeds, k)
    if criterion == "max_k":
        return refine_max_k(ranked, k)
    if criterion == "last_k":
        return refine_last_k(ranked, k)
    raise ConfigError("criterion", f"no refinement for {criterion!r}")
