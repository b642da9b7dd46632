"""Search spaces, observations, study histories and planner configuration.

Every value type here is immutable once constructed. Points are carried as
read-only ``numpy`` arrays: raw units at the study boundary, unit-cube
coordinates everywhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

# Relative slack allowed when checking bounds; absorbs exp/log round-off.
_BOUND_RTOL = 1e-12

CRITERIA = ("first_k", "max_k", "last_k", "none")
ACQUISITIONS = ("ei", "ucb", "plan")


class PlanHPOError(Exception):
    """Base class for errors raised by this package."""


class DomainError(PlanHPOError, ValueError):
    """A point lies outside its search space."""


class ProtocolError(PlanHPOError):
    """An ask/tell or history update was issued out of order."""


class ConfigError(PlanHPOError, ValueError):
    """Invalid configuration. ``field`` names the offending setting."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NumericalError(PlanHPOError, ArithmeticError):
    """Linear algebra failed even after jitter escalation."""


def frozen_array(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ParamSpec:
    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("name", "parameter name must be non-empty")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ConfigError(self.name, "bounds must be finite")
        if not self.lower < self.upper:
            raise ConfigError(self.name, f"lower ({self.lower}) must be < upper ({self.upper})")
        if self.scale not in ("linear", "log"):
            raise ConfigError(self.name, f"unsupported scale {self.scale!r}")
        if self.scale == "log" and self.lower <= 0:
            raise ConfigError(self.name, "log-scaled parameters need lower > 0")

    def to_dict(self) -> dict:
        return {"name": self.name, "type": "float", "lower": self.lower,
                "upper": self.upper, "scale": self.scale}


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[ParamSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(self.params))
        if not self.params:
            raise ConfigError("params", "search space needs at least one parameter")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("params", "parameter names must be unique")

    @property
    def dim(self) -> int:
        return len(self.params)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.params])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.params])

    @classmethod
    def box(cls, dim: int, lower: float, upper: float, prefix: str = "x") -> SearchSpace:
        """A ``dim``-dimensional linear box with identical bounds per axis."""
        if dim < 1:
            raise ConfigError("dim", "must be >= 1")
        return cls(tuple(ParamSpec(f"{prefix}{i}", lower, upper) for i in range(dim)))

    @classmethod
    def from_dicts(cls, items: Sequence[Mapping[str, Any]]) -> SearchSpace:
        specs = []
        for i, item in enumerate(items):
            kind = item.get("type", "float")
            if kind != "float":
                raise ConfigError(f"params[{i}].type",
                                  f"only continuous parameters are supported, got {kind!r}")
            specs.append(ParamSpec(str(item["name"]), float(item["lower"]),
                                   float(item["upper"]), item.get("scale", "linear")))
        return cls(tuple(specs))

    def to_dicts(self) -> list[dict]:
        return [p.to_dict() for p in self.params]

    def contains(self, x: Any) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,) or not np.all(np.isfinite(x)):
            return False
        lo, hi = self.lower, self.upper
        slack = _BOUND_RTOL * (hi - lo)
        return bool(np.all(x >= lo - slack) and np.all(x <= hi + slack))


def _log_mask(space: SearchSpace) -> np.ndarray:
    return np.array([p.scale == "log" for p in space.params])


def normalize(x: Any, space: SearchSpace) -> np.ndarray:
    """Map a raw point into the unit cube (log dims via log-ratio)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (space.dim,):
        raise DomainError(f"expected {space.dim} coordinates, got shape {x.shape}")
    if not space.contains(x):
        raise DomainError(f"point {x.tolist()} outside search space bounds")
    lo, hi = space.lower, space.upper
    logs = _log_mask(space)
    u = np.empty(space.dim)
    lin = ~logs
    u[lin] = (x[lin] - lo[lin]) / (hi[lin] - lo[lin])
    if logs.any():
        xl = np.maximum(x[logs], lo[logs])
        u[logs] = np.log(xl / lo[logs]) / np.log(hi[logs] / lo[logs])
    return frozen_array(np.clip(u, 0.0, 1.0))


def denormalize(u: Any, space: SearchSpace) -> np.ndarray:
    """Inverse of :func:`normalize`."""
    u = np.asarray(u, dtype=float)
    if u.shape != (space.dim,):
        raise DomainError(f"expected {space.dim} coordinates, got shape {u.shape}")
    if not np.all(np.isfinite(u)) or np.any(u < -_BOUND_RTOL) or np.any(u > 1 + _BOUND_RTOL):
        raise DomainError(f"unit-cube point {u.tolist()} outside [0, 1]")
    u = np.clip(u, 0.0, 1.0)
    lo, hi = space.lower, space.upper
    logs = _log_mask(space)
    x = lo + u * (hi - lo)
    if logs.any():
        x[logs] = np.exp(np.log(lo[logs]) + u[logs] * np.log(hi[logs] / lo[logs]))
    return frozen_array(np.clip(x, lo, hi))


@dataclass(frozen=True)
class StudyMeta:
    study_id: str
    objective_name: str
    space: SearchSpace
    direction: str = "maximize"

    def __post_init__(self) -> None:
        if self.direction != "maximize":
            raise ConfigError("direction", "studies are always maximized")


@dataclass(frozen=True, eq=False)
class Observation:
    x: np.ndarray
    y: float
    trial_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", frozen_array(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not math.isfinite(self.y):
            raise ProtocolError(f"objective value must be finite, got {self.y}")
        if self.trial_index < 1:
            raise ProtocolError("trial indices start at 1")


@dataclass(frozen=True, eq=False)
class History:
    """Observed trajectory of a study.

    ``best_value`` is ``-inf`` and ``best_x`` is ``None`` until the first
    observation arrives.
    """

    meta: StudyMeta
    observations: tuple[Observation, ...] = ()
    best_value: float = -math.inf
    best_x: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def space(self) -> SearchSpace:
        return self.meta.space

    def xs(self) -> np.ndarray:
        if not self.observations:
            return np.empty((0, self.space.dim))
        return np.stack([o.x for o in self.observations])

    def ys(self) -> np.ndarray:
        return np.array([o.y for o in self.observations], dtype=float)

    def unit_xs(self) -> np.ndarray:
        if not self.observations:
            return np.empty((0, self.space.dim))
        return np.stack([normalize(o.x, self.space) for o in self.observations])


def empty_history(meta: StudyMeta) -> History:
    return History(meta=meta)


def update_history(history: History, obs: Observation) -> History:
    """Return ``history`` with ``obs`` appended; the input is left untouched."""
    expected = len(history.observations) + 1
    if obs.trial_index != expected:
        raise ProtocolError(f"expected trial_index {expected}, got {obs.trial_index}")
    if not history.space.contains(obs.x):
        raise DomainError(f"observation {obs.x.tolist()} outside search space")
    best_value, best_x = history.best_value, history.best_x
    if obs.y > best_value:
        best_value, best_x = obs.y, obs.x
    return History(history.meta, history.observations + (obs,), best_value, best_x)


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: float
    variance: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise NumericalError(f"non-finite prediction ({self.mean}, {self.variance})")
        if self.variance < 0:
            raise NumericalError(f"negative variance {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class PlannerConfig:
    """Knobs of the planning optimizer.

    ``n_seed``, ``k_refine``, ``horizon`` and ``n_rollouts`` are the seed-set
    size, refined-set size, rollout length and rollouts per candidate used by
    the planning acquisition.
    """

    n_seed: int = 100
    k_refine: int = 50
    horizon: int = 5
    n_rollouts: int = 64
    budget: int = 100
    criterion: str = "max_k"
    acquisition: str = "ei"
    rng_seed: int = 0
    ucb_beta: float = 4.0
    proposal_count: int = 512
    temperature: float = 0.1
    fantasized_incumbent: bool = False
    kernel: str = "matern52"
    hyper_restarts: int = 8
    hyper_max_evals: int = 200

    def __post_init__(self) -> None:
        for name in ("n_seed", "k_refine", "horizon", "n_rollouts", "budget",
                     "proposal_count", "hyper_restarts", "hyper_max_evals"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {value!r}")
        if self.k_refine > self.n_seed:
            raise ConfigError("k_refine", f"k_refine ({self.k_refine}) exceeds n_seed ({self.n_seed})")
        if self.criterion not in CRITERIA:
            raise ConfigError("criterion", f"must be one of {CRITERIA}, got {self.criterion!r}")
        if self.acquisition not in ACQUISITIONS:
            raise ConfigError("acquisition", f"must be one of {ACQUISITIONS}, got {self.acquisition!r}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ConfigError("rng_seed", "must be an unsigned 64-bit integer")
        if not self.ucb_beta > 0:
            raise ConfigError("ucb_beta", "must be > 0")
        if not self.temperature > 0:
            raise ConfigError("temperature", "must be > 0")
        if self.kernel not in ("matern52", "squared_exponential"):
            raise ConfigError("kernel", f"unknown kernel {self.kernel!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], prefix: str = "") -> PlannerConfig:
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{prefix}{key}", "unknown planner setting")
        try:
            return cls(**dict(data))
        except ConfigError as exc:
            raise ConfigError(f"{prefix}{exc.field}", str(exc).split(": ", 1)[-1]) from None
        except TypeError as exc:
            raise ConfigError(prefix.rstrip(".") or "planner", str(exc)) from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_(self, **changes: Any) -> PlannerConfig:
        return replace(self, **changes)


def substream(seed: int | Sequence[int], *key: int) -> np.random.Generator:
    """Generator for the stream addressed by ``key`` under ``seed``.

    Streams with distinct keys are independent, and a stream never depends on
    which other streams were drawn before it.
    """
    return np.random.default_rng(seed_sequence(seed, *key))


def seed_sequence(seed: int | Sequence[int] | np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(k) for k in key))
    return np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))


__all__ = [
    "ACQUISITIONS", "CRITERIA", "ConfigError", "DomainError", "History", "NumericalError",
    "Observation", "ParamSpec", "PlanHPOError", "PlannerConfig", "PredictiveDistribution",
    "ProtocolError", "SearchSpace", "StudyMeta", "denormalize", "empty_history",
    "frozen_array", "normalize", "seed_sequence", "substream", "update_history",
]
