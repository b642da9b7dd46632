"""Expected improvement, UCB and the rollout-averaged planning acquisition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import PredictiveDistribution
from .policy import PolicyState
from .rollout import FantasyTrajectory, SampleCounter, rollout_batch
from .surrogate import GpPosterior, predict_arrays

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class AcquisitionScore:
    candidate_index: int
    score: float
    per_step_terms: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class Selection:
    """Winning candidate plus every candidate's score, in candidate order."""

    index: int
    x: np.ndarray
    scores: tuple[AcquisitionScore, ...]
    trajectories: tuple[tuple[FantasyTrajectory, ...], ...] | None = None

    def score_array(self) -> np.ndarray:
        return np.array([s.score for s in self.scores])


def ei_array(mean: np.ndarray, variance: np.ndarray, incumbent: float | np.ndarray) -> np.ndarray:
    """Closed-form Gaussian EI, ``E[max(y - incumbent, 0)]``, elementwise.

    Zero variance reduces to ``max(mean - incumbent, 0)``. An incumbent of
    ``-inf`` (no observations yet) scores the predictive mean.
    """
    arrays = [np.asarray(v, float) for v in (mean, variance, incumbent)]
    shape = np.broadcast_shapes(*(a.shape for a in arrays))
    mean, variance, incumbent = (np.broadcast_to(a, shape).ravel() for a in arrays)
    sigma = np.sqrt(np.maximum(variance, 0.0))
    gap = mean - incumbent
    out = np.maximum(gap, 0.0)
    pos = (sigma > 0) & np.isfinite(gap)
    if np.any(pos):
        z = gap[pos] / sigma[pos]
        out[pos] = np.maximum(sigma[pos] * (z * ndtr(z) + _INV_SQRT_2PI * np.exp(-0.5 * z * z)), 0.0)
    no_incumbent = np.isneginf(incumbent)
    out[no_incumbent] = mean[no_incumbent]
    return out.reshape(shape)


def ei(dist: PredictiveDistribution, incumbent: float) -> float:
    return float(ei_array(dist.mean, dist.variance, incumbent))


def ucb(dist: PredictiveDistribution, beta: float) -> float:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return dist.mean + math.sqrt(beta) * math.sqrt(dist.variance)


def _points(candidates) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(candidates, "points", candidates), float))


def _select(points: np.ndarray, scores: np.ndarray, terms: np.ndarray | None = None,
            trajectories=None) -> Selection:
    best = int(np.argmax(scores))
    records = tuple(
        AcquisitionScore(i, float(scores[i]), None if terms is None else tuple(float(t) for t in terms[i]))
        for i in range(len(scores)))
    return Selection(best, points[best].copy(), records, trajectories)


def evaluate_ei(candidates, gp: GpPosterior, incumbent: float) -> Selection:
    """Score every candidate by EI under ``gp``; ties go to the lowest index."""
    points = _points(candidates)
    mean, var = predict_arrays(gp, points)
    return _select(points, ei_array(mean, var, incumbent))


def evaluate_ucb(candidates, gp: GpPosterior, beta: float) -> Selection:
    points = _points(candidates)
    mean, var = predict_arrays(gp, points)
    return _select(points, mean + math.sqrt(beta) * np.sqrt(var))


def plan_terms(trajs: list[list[FantasyTrajectory]], base_ei: np.ndarray, incumbent: float,
               fantasized_incumbent: bool = False) -> np.ndarray:
    """Per-candidate, per-step rollout-averaged EI terms, shape ``(n_candidates, h)``.

    Step 0 is ``base_ei`` (exact EI under the real posterior). Step ``i``
    scores the rollout's step-``i`` suggestion under the posterior fantasized
    on that rollout's steps ``0..i-1``, then averages over rollouts.
    """
    n = len(trajs)
    h = trajs[0][0].horizon if n else 1
    terms = np.zeros((n, h))
    terms[:, 0] = base_ei
    if h == 1:
        return terms
    for c, group in enumerate(trajs):
        mean = np.array([[s.mean for s in t.steps[1:]] for t in group])
        var = np.array([[s.variance for s in t.steps[1:]] for t in group])
        if fantasized_incumbent:
            ys = np.array([[s.y for s in t.steps[:-1]] for t in group])
            inc = np.maximum(incumbent, np.maximum.accumulate(ys, axis=1))
        else:
            inc = incumbent
        terms[c, 1:] = ei_array(mean, var, inc).mean(axis=0)
    return terms


def evaluate_plan(
    candidates,
    policy: PolicyState,
    incumbent: float,
    h: int,
    d: int,
    seed_seq: np.random.SeedSequence,
    *,
    fantasized_incumbent: bool = False,
    counter: SampleCounter | None = None,
    workers: int = 1,
) -> Selection:
    """Planning acquisition: sum over the horizon of rollout-averaged EI.

    Each candidate gets ``d`` rollouts of length ``h``. The incumbent stays at
    the best real observation throughout unless ``fantasized_incumbent`` is
    set, in which case it tracks the running best of each rollout. With
    ``h == 1`` only the exact step-0 EI remains and no rollouts are drawn.
    """
    if h < 1 or d < 1:
        raise ValueError("horizon and rollout count must be >= 1")
    points = _points(candidates)
    mean, var = predict_arrays(policy.gp, points)
    base = ei_array(mean, var, incumbent)
    if h == 1:
        return _select(points, base, base[:, None])
    trajs = rollout_batch(policy, points, h, d, seed_seq, counter=counter, workers=workers)
    terms = plan_terms(trajs, base, incumbent, fantasized_incumbent)
    return _select(points, terms.sum(axis=1), terms, tuple(tuple(g) for g in trajs))
