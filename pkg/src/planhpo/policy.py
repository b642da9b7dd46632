"""Prior policies: a stochastic GP-UCB sampler and a uniform-random sampler.

The GP-UCB policy draws ``proposal_count`` uniform points from the unit cube,
scores them with an upper confidence bound on the standardized scale, and
samples one through a softmax at ``temperature``. Sampling instead of taking
the argmax keeps repeated suggestions diverse, which a seed set needs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import SearchSpace, denormalize
from .surrogate import GpPosterior, fantasize, predict_standardized

# Below this temperature the softmax is replaced by an exact argmax.
GREEDY_TEMPERATURE = 1e-8


@dataclass(frozen=True, eq=False)
class PolicyState:
    """Everything a suggestion depends on.

    ``gp`` is ``None`` before any data exists, in which case every proposal
    scores the same. ``proposals`` optionally pins a fixed unit-cube pool that
    replaces the fresh uniform draws; only the selection is then random.
    """

    gp: GpPosterior | None
    rng: np.random.Generator
    ucb_beta: float = 4.0
    proposal_count: int = 512
    temperature: float = 0.1
    proposals: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.proposal_count < 1:
            raise ValueError("proposal_count must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not self.ucb_beta > 0:
            raise ValueError("ucb_beta must be > 0")
        if self.proposals is not None:
            pool = np.array(self.proposals, dtype=float, ndmin=2)
            pool.flags.writeable = False
            object.__setattr__(self, "proposals", pool)


def ucb_scores(state: PolicyState, points: np.ndarray) -> np.ndarray:
    """UCB of each unit-cube point on the standardized target scale."""
    points = np.atleast_2d(points)
    if state.gp is None:
        return np.zeros(len(points))
    mean, var = predict_standardized(state.gp, points)
    return mean + np.sqrt(state.ucb_beta) * np.sqrt(var + state.gp.kernel.noise_variance)


def softmax_pick(scores: np.ndarray, temperature: float, u: float) -> int:
    """Index drawn from ``softmax(scores / temperature)`` by inverse CDF at ``u``."""
    if temperature < GREEDY_TEMPERATURE:
        return int(np.argmax(scores))
    w = np.exp((scores - np.max(scores)) / temperature)
    c = np.cumsum(w)
    return min(int(np.searchsorted(c, u * c[-1], side="right")), len(scores) - 1)


def softmax_pick_rows(scores: np.ndarray, temperature: float, u: np.ndarray) -> np.ndarray:
    """Row-wise :func:`softmax_pick` for a ``(batch, q)`` score matrix."""
    if temperature < GREEDY_TEMPERATURE:
        return np.argmax(scores, axis=1)
    w = np.exp((scores - np.max(scores, axis=1, keepdims=True)) / temperature)
    c = np.cumsum(w, axis=1)
    target = u * c[:, -1]
    idx = np.sum(c <= target[:, None], axis=1)
    return np.minimum(idx, scores.shape[1] - 1)


def draw_proposals(state: PolicyState, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Proposal pool and selection uniform for one suggestion, in stream order."""
    if state.proposals is None:
        pool = rng.random((state.proposal_count, dim))
    else:
        pool = state.proposals
    return pool, rng.random()


def suggest(state: PolicyState, space: SearchSpace | int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample the next query (unit-cube coordinates) from the policy."""
    dim = space if isinstance(space, int) else space.dim
    rng = state.rng if rng is None else rng
    pool, u = draw_proposals(state, dim, rng)
    return pool[softmax_pick(ucb_scores(state, pool), state.temperature, u)].copy()


def suggest_many(state: PolicyState, space: SearchSpace | int, n: int,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """``n`` independent suggestions; consumes ``rng`` exactly like ``n`` :func:`suggest` calls."""
    dim = space if isinstance(space, int) else space.dim
    rng = state.rng if rng is None else rng
    pools, us = [], []
    for _ in range(n):
        pool, u = draw_proposals(state, dim, rng)
        pools.append(pool)
        us.append(u)
    pools = np.stack(pools)
    q = pools.shape[1]
    scores = ucb_scores(state, pools.reshape(n * q, dim)).reshape(n, q)
    picks = softmax_pick_rows(scores, state.temperature, np.array(us))
    return pools[np.arange(n), picks].copy()


def condition(state: PolicyState, x_unit: np.ndarray, y: float) -> PolicyState:
    """A new state whose posterior also sees the imagined ``(x_unit, y)``.

    The returned state gets its own generator, keyed by the posterior size, so
    neither state's stream is consumed or shared.
    """
    if state.gp is None:
        raise ValueError("cannot condition a policy without a surrogate")
    gp = fantasize(state.gp, x_unit, y)
    seq = state.rng.bit_generator.seed_seq
    child = np.random.SeedSequence(seq.entropy, spawn_key=tuple(seq.spawn_key) + (gp.n,))
    return replace(state, gp=gp, rng=np.random.default_rng(child))


def suggest_random(space: SearchSpace, rng: np.random.Generator) -> np.ndarray:
    """Uniform point in the unit cube, mapped to raw units (log dims log-uniform)."""
    return denormalize(rng.random(space.dim), space)
