"""Rollout-based candidate generation and planning acquisition for sequential HPO."""

from .acquisition import ei, evaluate_ei, evaluate_plan, evaluate_ucb, ucb
from .bench import aggregate, make_function, run_experiment
from .candgen import generate_seed_set, rank_rollouts, refine
from .core import (
    ConfigError,
    DomainError,
    History,
    NumericalError,
    Observation,
    ParamSpec,
    PlanHPOError,
    PlannerConfig,
    ProtocolError,
    SearchSpace,
    StudyMeta,
)
from .optimizer import StrategySpec, ask, replay, run_study, tell
from .rollout import rollout_batch

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "History", "NumericalError", "Observation", "ParamSpec",
    "PlanHPOError", "PlannerConfig", "ProtocolError", "SearchSpace", "StrategySpec", "StudyMeta",
    "aggregate", "ask", "ei", "evaluate_ei", "evaluate_plan", "evaluate_ucb", "generate_seed_set",
    "make_function", "rank_rollouts", "refine", "replay", "rollout_batch", "run_experiment",
    "run_study", "tell", "ucb",
]
