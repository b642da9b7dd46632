"""Fantasy rollouts: alternate policy suggestions with surrogate draws.

A rollout seeded at candidate ``x`` evaluates ``x`` first (no policy draw),
then for each later step conditions the policy on the fantasy so far,
suggests the next point, and samples its value. A length-``h`` rollout
therefore uses ``h`` value draws and ``h - 1`` suggestions.

Trajectories are computed in fixed blocks of ``block_size`` consecutive
(candidate, rollout) pairs. Inside a block every trajectory keeps its own
fantasized Cholesky rows against the shared base posterior, so all
trajectories advance together with one shared kernel evaluation per step.
Block boundaries never depend on the worker count, and each trajectory owns
the substream keyed by ``(candidate, rollout)``, so any number of workers
produces bitwise-identical trajectories.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .core import NumericalError, SearchSpace, denormalize, frozen_array, seed_sequence
from .policy import PolicyState, draw_proposals, softmax_pick_rows
from .surrogate import kernel_matrix

DEFAULT_BLOCK_SIZE = 64
_PIVOT_RTOL = 1e-14


@dataclass(frozen=True, eq=False)
class FantasyStep:
    """One imagined ``(x, y)`` pair.

    ``mean`` and ``variance`` describe the predictive distribution ``y`` was
    drawn from, i.e. the posterior fantasized on the earlier steps.
    """

    x: np.ndarray
    y: float
    step_offset: int
    mean: float
    variance: float


@dataclass(frozen=True, eq=False)
class FantasyTrajectory:
    seed_x: np.ndarray
    steps: tuple[FantasyStep, ...]
    y_star: float
    argmax_step: int

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def best_x(self) -> np.ndarray:
        return self.steps[self.argmax_step].x

    @property
    def last_x(self) -> np.ndarray:
        return self.steps[-1].x

    def to_json(self, space: SearchSpace | None = None) -> dict[str, Any]:
        """JSON-ready dict; coordinates are raw units when ``space`` is given."""
        def coords(u):
            return (denormalize(u, space) if space is not None else u).tolist()
        return {
            "seed_x": coords(self.seed_x),
            "steps": [{"x": coords(s.x), "y": s.y, "step_offset": s.step_offset,
                       "mean": s.mean, "variance": s.variance} for s in self.steps],
            "y_star": self.y_star,
            "argmax_step": self.argmax_step,
        }


def make_trajectory(xs: np.ndarray, ys: Sequence[float], means: Sequence[float],
                    variances: Sequence[float]) -> FantasyTrajectory:
    steps = tuple(FantasyStep(frozen_array(xs[j]), float(ys[j]), j, float(means[j]), float(variances[j]))
                  for j in range(len(ys)))
    best = int(np.argmax(ys))
    return FantasyTrajectory(steps[0].x, steps, float(ys[best]), best)


class SampleCounter:
    """Thread-safe tally of surrogate value draws, policy suggestions and trajectories."""

    def __init__(self) -> None:
        self.value_samples = 0
        self.suggestions = 0
        self.trajectories = 0
        self._lock = threading.Lock()

    def add(self, value_samples: int = 0, suggestions: int = 0, trajectories: int = 0) -> None:
        with self._lock:
            self.value_samples += value_samples
            self.suggestions += suggestions
            self.trajectories += trajectories

    def snapshot(self) -> dict[str, int]:
        return {"value_samples": self.value_samples, "suggestions": self.suggestions,
                "trajectories": self.trajectories}


def _run_block(state: PolicyState, seeds: np.ndarray, h: int,
               rngs: Sequence[np.random.Generator]) -> tuple[list[FantasyTrajectory], np.ndarray]:
    """Advance ``len(rngs)`` rollouts in lockstep. Returns trajectories and a failure mask."""
    gp = state.gp
    kern = gp.kernel
    nb, dim = seeds.shape
    n = gp.n
    s2, noise = kern.signal_variance, kern.noise_variance
    pivot_floor = _PIVOT_RTOL * (s2 + noise)
    sqrt_beta = math.sqrt(state.ucb_beta)
    batch = np.arange(nb)

    xs = np.empty((nb, h, dim))
    ys = np.empty((nb, h))
    means = np.empty((nb, h))
    variances = np.empty((nb, h))
    rows = np.empty((nb, h, n))     # fantasy rows of the Cholesky factor against real data
    tri = np.zeros((nb, h, h))      # fantasy-by-fantasy block of the factor
    zf = np.empty((nb, h))          # fantasy entries of chol^{-1} y
    active = np.ones((nb, h), dtype=bool)
    failed = np.zeros(nb, dtype=bool)

    def posterior(points: np.ndarray, j: int):
        m = points.shape[1]
        vb = gp.chol_inv @ kernel_matrix(kern, gp.train_x, points.reshape(nb * m, dim))
        mean = (gp.z @ vb).reshape(nb, m)
        ss = np.einsum("ij,ij->j", vb, vb).reshape(nb, m)
        vb = vb.reshape(n, nb, m).transpose(1, 0, 2)
        if j == 0:
            return mean, s2 - ss, vb, None
        w = kernel_matrix(kern, xs[:, :j], points) - np.matmul(rows[:, :j], vb)
        vf = np.empty((nb, j, m))
        for r in range(j):
            acc = w[:, r]
            if r:
                acc = acc - np.einsum("bk,bkm->bm", tri[:, r, :r], vf[:, :r])
            vf[:, r] = np.where(active[:, r, None], acc / tri[:, r, r][:, None], 0.0)
        mean = mean + np.einsum("bj,bjm->bm", zf[:, :j], vf)
        ss = ss + np.einsum("bjm,bjm->bm", vf, vf)
        return mean, s2 - ss, vb, vf

    def record(j: int, x: np.ndarray, mean: np.ndarray, latent: np.ndarray,
               vb_sel: np.ndarray, vf_sel: np.ndarray | None) -> None:
        var = np.maximum(latent, 0.0) + noise
        draws = np.array([rng.standard_normal() for rng in rngs])
        y = mean + np.sqrt(var) * draws
        xs[:, j], ys[:, j], means[:, j], variances[:, j] = x, y, mean, var
        failed[~(np.isfinite(y) & np.isfinite(var))] = True
        if j == h - 1:
            return
        # A vanishing pivot means the point is already pinned down by the
        # conditioning set; its row is dropped rather than factored.
        pivot_sq = latent + noise + gp.jitter
        keep = pivot_sq > pivot_floor
        active[:, j] = keep
        pivot = np.sqrt(np.where(keep, pivot_sq, 1.0))
        rows[:, j] = np.where(keep[:, None], vb_sel, 0.0)
        if j:
            tri[:, j, :j] = np.where(keep[:, None], vf_sel, 0.0)
        tri[:, j, j] = pivot
        zf[:, j] = np.where(keep, (y - mean) / pivot, 0.0)

    mean, latent, vb, _ = posterior(seeds[:, None, :], 0)
    record(0, seeds, mean[:, 0], latent[:, 0], vb[:, :, 0], None)
    for j in range(1, h):
        drawn = [draw_proposals(state, dim, rng) for rng in rngs]
        pools = np.stack([p for p, _ in drawn])
        us = np.array([u for _, u in drawn])
        mean, latent, vb, vf = posterior(pools, j)
        scores = mean + sqrt_beta * np.sqrt(np.maximum(latent, 0.0) + noise)
        pick = softmax_pick_rows(scores, state.temperature, us)
        record(j, pools[batch, pick], mean[batch, pick], latent[batch, pick],
               vb[batch, :, pick], vf[batch, :, pick])

    tm, ts = gp.target_mean, gp.target_std
    trajs = [make_trajectory(xs[b], tm + ts * ys[b], tm + ts * means[b], ts * ts * variances[b])
             for b in range(nb)]
    return trajs, failed


def _as_points(seeds: Any) -> np.ndarray:
    points = getattr(seeds, "points", seeds)
    return np.atleast_2d(np.asarray(points, dtype=float))


def rollout(policy: PolicyState, seed_x: np.ndarray, h: int,
            rng: np.random.Generator | np.random.SeedSequence | int,
            counter: SampleCounter | None = None) -> FantasyTrajectory:
    """One length-``h`` fantasy trajectory seeded at unit-cube point ``seed_x``.

    A non-finite draw aborts the trajectory and retries once on a fresh
    substream; a second failure raises :class:`NumericalError`.
    """
    if h < 1:
        raise ValueError("horizon must be >= 1")
    if policy.gp is None:
        raise ValueError("rollouts need a fitted surrogate")
    if isinstance(rng, np.random.Generator):
        gens = [rng, lambda: rng.spawn(1)[0]]
    else:
        seq = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(rng)
        gens = [np.random.default_rng(seq), lambda: np.random.default_rng(seed_sequence(seq, 1))]
    seeds = np.asarray(seed_x, float).reshape(1, -1)
    trajs, failed = _run_block(policy, seeds, h, [gens[0]])
    _count(counter, 1, h)
    if failed[0]:
        trajs, failed = _run_block(policy, seeds, h, [gens[1]()])
        _count(counter, 1, h)
        if failed[0]:
            raise NumericalError("rollout produced non-finite values twice")
    return trajs[0]


def _count(counter: SampleCounter | None, n_traj: int, h: int) -> None:
    if counter is not None:
        counter.add(value_samples=n_traj * h, suggestions=n_traj * (h - 1), trajectories=n_traj)


def rollout_batch(
    policy: PolicyState,
    seeds: Any,
    h: int,
    d: int,
    seed_seq: np.random.SeedSequence,
    *,
    counter: SampleCounter | None = None,
    workers: int = 1,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> list[list[FantasyTrajectory]]:
    """``d`` independent rollouts of length ``h`` for every seed candidate.

    Rollout ``r`` of candidate ``c`` draws from the substream
    ``seed_seq + (c, r)``; ``result[c][r]`` is that trajectory whatever the
    number of ``workers``.
    """
    if h < 1 or d < 1:
        raise ValueError("horizon and rollout count must be >= 1")
    if policy.gp is None:
        raise ValueError("rollouts need a fitted surrogate")
    points = _as_points(seeds)
    tasks = [(c, r) for c in range(len(points)) for r in range(d)]
    blocks = [tasks[i:i + block_size] for i in range(0, len(tasks), block_size)]

    def run(block):
        rngs = [np.random.default_rng(seed_sequence(seed_seq, c, r)) for c, r in block]
        trajs, failed = _run_block(policy, points[[c for c, _ in block]], h, rngs)
        _count(counter, len(block), h)
        for i in np.flatnonzero(failed):
            c, r = block[i]
            retry = [np.random.default_rng(seed_sequence(seed_seq, c, r, 1))]
            again, still = _run_block(policy, points[c:c + 1], h, retry)
            _count(counter, 1, h)
            if still[0]:
                raise NumericalError(f"rollout ({c}, {r}) produced non-finite values twice")
            trajs[i] = again[0]
        return trajs

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(run, blocks))
    else:
        done = [run(b) for b in blocks]
    flat = [t for block in done for t in block]
    return [flat[c * d:(c + 1) * d] for c in range(len(points))]
