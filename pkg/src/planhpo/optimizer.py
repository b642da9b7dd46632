"""Ask/tell loop over prior, augmented and planning strategies.

Every random choice in a trial draws from a substream keyed by
``(trial, stage)`` under the study seed, so a study is a pure function of
its seed, its strategy and the objective.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import numpy as np

from .acquisition import Selection, evaluate_ei, evaluate_plan, evaluate_ucb
from .candgen import CandidateSet, generate_seed_set, rank_rollouts, refine
from .core import (
    ConfigError,
    History,
    NumericalError,
    Observation,
    PlannerConfig,
    ProtocolError,
    SearchSpace,
    StudyMeta,
    denormalize,
    empty_history,
    seed_sequence,
    substream,
    update_history,
)
from .policy import PolicyState, suggest, suggest_random
from .rollout import FantasyTrajectory, SampleCounter, rollout_batch
from .surrogate import fit, fit_hyperparameters

logger = logging.getLogger(__name__)

COLD_START = 2
PRIORS = ("gp_ucb", "random")

# Substream stage keys within a trial.
STAGE_COLD, STAGE_HYPER, STAGE_SEEDS, STAGE_REFINE, STAGE_PLAN, STAGE_PRIOR, STAGE_FALLBACK = range(7)


@dataclass(frozen=True)
class StrategySpec:
    """A named optimizer variant.

    ``uses_seed_set=False`` plays the prior policy directly (one sample per
    trial, no acquisition). ``prior='random'`` swaps the GP-UCB sampler for a
    uniform one.
    """

    name: str
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    uses_seed_set: bool = True
    prior: str = "gp_ucb"

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("name", "strategy name must be non-empty")
        if self.prior not in PRIORS:
            raise ConfigError("prior", f"must be one of {PRIORS}, got {self.prior!r}")

    @property
    def criterion(self) -> str:
        return self.planner.criterion

    @property
    def acquisition(self) -> str:
        return self.planner.acquisition

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], defaults: PlannerConfig | None = None,
                  prefix: str = "") -> StrategySpec:
        data = dict(data)
        known = {"name", "uses_seed_set", "prior", "planner", "criterion", "acquisition"}
        for key in data:
            if key not in known:
                raise ConfigError(f"{prefix}{key}", "unknown strategy setting")
        if "name" not in data:
            raise ConfigError(f"{prefix}name", "strategy name is required")
        base = (defaults or PlannerConfig()).to_dict()
        base.update(data.get("planner", {}))
        for key in ("criterion", "acquisition"):
            if key in data:
                base[key] = data[key]
        planner = PlannerConfig.from_dict(base, prefix=f"{prefix}planner.")
        try:
            return cls(str(data["name"]), planner, bool(data.get("uses_seed_set", True)),
                       data.get("prior", "gp_ucb"))
        except ConfigError as exc:
            raise ConfigError(f"{prefix}{exc.field}", str(exc).split(": ", 1)[-1]) from None

    def to_dict(self) -> dict:
        return {"name": self.name, "uses_seed_set": self.uses_seed_set, "prior": self.prior,
                "planner": self.planner.to_dict()}


class Recorder(Protocol):
    def trajectories(self, trial: int, stage: str, trajs: list[FantasyTrajectory]) -> None: ...
    def scores(self, trial: int, criterion: str, selection: Selection) -> None: ...


def _policy_state(strategy: StrategySpec, gp, rng: np.random.Generator) -> PolicyState:
    p = strategy.planner
    q = 1 if strategy.prior == "random" else p.proposal_count
    return PolicyState(gp, rng, p.ucb_beta, q, p.temperature)


def ask(
    strategy: StrategySpec,
    history: History,
    seed: int,
    *,
    recorder: Recorder | None = None,
    counter: SampleCounter | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Next point to evaluate, in raw units.

    With fewer than two observations this is a uniform random point. After
    that: fit kernel hyperparameters and the GP, draw the seed set from the
    prior policy, optionally refine it through rollouts, and return the
    acquisition maximizer. Surrogate failures degrade to a random point.
    """
    space = history.space
    trial = len(history) + 1
    if len(history) < COLD_START:
        return suggest_random(space, substream(seed, trial, STAGE_COLD))
    try:
        return _ask_model(strategy, history, seed, trial, recorder, counter, workers)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        logger.warning("trial %d: surrogate failure (%s); falling back to random", trial, exc)
        return suggest_random(space, substream(seed, trial, STAGE_FALLBACK))


def _ask_model(strategy, history, seed, trial, recorder, counter, workers) -> np.ndarray:
    space = history.space
    p = strategy.planner
    if strategy.prior == "random" and not strategy.uses_seed_set:
        return suggest_random(space, substream(seed, trial, STAGE_PRIOR))
    kernel = fit_hyperparameters(history, seed=substream(seed, trial, STAGE_HYPER), variant=p.kernel,
                                 restarts=p.hyper_restarts, max_evals=p.hyper_max_evals)
    gp = fit(history, kernel)
    policy = _policy_state(strategy, gp, substream(seed, trial, STAGE_SEEDS))
    if not strategy.uses_seed_set:
        return denormalize(suggest(policy, space, substream(seed, trial, STAGE_PRIOR)), space)

    seeds = generate_seed_set(policy, p.n_seed, dim=space.dim)
    candidates: CandidateSet = seeds
    if p.criterion != "none":
        trajs = rollout_batch(policy, seeds, p.horizon, 1, seed_sequence(seed, trial, STAGE_REFINE),
                              counter=counter, workers=workers)
        flat = [group[0] for group in trajs]
        if recorder is not None:
            recorder.trajectories(trial, "refine", flat)
        candidates = refine(p.criterion, rank_rollouts(flat), seeds, p.k_refine)

    incumbent = history.best_value
    if p.acquisition == "ei":
        selection = evaluate_ei(candidates, gp, incumbent)
    elif p.acquisition == "ucb":
        selection = evaluate_ucb(candidates, gp, p.ucb_beta)
    else:
        selection = evaluate_plan(candidates, policy, incumbent, p.horizon, p.n_rollouts,
                                  seed_sequence(seed, trial, STAGE_PLAN),
                                  fantasized_incumbent=p.fantasized_incumbent,
                                  counter=counter, workers=workers)
        if recorder is not None and selection.trajectories is not None:
            recorder.trajectories(trial, "plan", [t for g in selection.trajectories for t in g])
    if recorder is not None:
        recorder.scores(trial, p.criterion, selection)
    return denormalize(selection.x, space)


def tell(history: History, x: Any, y: float) -> History:
    """Record the outcome of the next trial."""
    y = float(y)
    if not math.isfinite(y):
        raise ProtocolError(f"objective returned non-finite value {y}")
    return update_history(history, Observation(np.asarray(x, float), y, len(history) + 1))


class StudyAborted(RuntimeError):
    """The objective raised; ``history`` holds every trial completed before it."""

    def __init__(self, history: History, cause: BaseException):
        super().__init__(f"study aborted after {len(history)} trials: {cause!r}")
        self.history = history
        self.cause = cause


def run_study(
    strategy: StrategySpec,
    objective: Callable[[np.ndarray], float],
    space: SearchSpace,
    budget: int | None = None,
    seed: int | None = None,
    *,
    study_id: str = "study",
    log_path: str | Path | None = None,
    log_extra: Mapping[str, Any] | None = None,
    record_wall_time: bool = True,
    recorder: Recorder | None = None,
    counter: SampleCounter | None = None,
    workers: int = 1,
) -> History:
    """Run ``budget`` ask/tell rounds against ``objective`` (maximized).

    When ``log_path`` is given, one JSON line per trial is appended as the
    study progresses, so a crash leaves the completed prefix on disk.
    """
    budget = strategy.planner.budget if budget is None else budget
    seed = strategy.planner.rng_seed if seed is None else seed
    if budget < 1:
        raise ConfigError("budget", "must be >= 1")
    history = empty_history(StudyMeta(study_id, getattr(objective, "__name__", "objective"), space))
    log = open(log_path, "w") if log_path is not None else None
    try:
        for _ in range(budget):
            start = time.perf_counter()
            x = ask(strategy, history, seed, recorder=recorder, counter=counter, workers=workers)
            try:
                y = objective(x)
            except Exception as exc:
                raise StudyAborted(history, exc) from exc
            history = tell(history, x, y)
            wall_ms = (time.perf_counter() - start) * 1e3
            if log is not None:
                record = {"trial": len(history), "x": [float(v) for v in x], "y": float(y),
                          "best_so_far": history.best_value, "strategy": strategy.name,
                          "wall_ms": round(wall_ms, 3) if record_wall_time else None}
                record.update(log_extra or {})
                log.write(json.dumps(record) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    return history


def replay(space: SearchSpace, records: list[Mapping[str, Any]], study_id: str = "replay") -> History:
    """Rebuild a history from logged ``(x, y)`` records via :func:`tell`.

    Raises :class:`ProtocolError` if the log's trial numbers or running best
    disagree with the rebuilt history.
    """
    history = empty_history(StudyMeta(study_id, "replay", space))
    for i, rec in enumerate(records):
        if int(rec["trial"]) != i + 1:
            raise ProtocolError(f"record {i}: trial {rec['trial']} breaks contiguity")
        history = tell(history, rec["x"], rec["y"])
        if "best_so_far" in rec and not history.best_value == float(rec["best_so_far"]):
            raise ProtocolError(f"trial {i + 1}: logged best_so_far {rec['best_so_far']} "
                                f"!= recomputed {history.best_value}")
    return history
