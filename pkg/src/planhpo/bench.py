"""Shifted synthetic test functions and the experiment matrix runner.

Functions are written in their usual minimization form on ``[-5, 5]^d``.
The optimizer always sees the negation. Each instance seed moves the
optimum to a random location inside the box.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .acquisition import Selection
from .core import ConfigError, SearchSpace, StudyMeta, empty_history, frozen_array
from .optimizer import StrategySpec, StudyAborted, ask, run_study

logger = logging.getLogger(__name__)

BOUND = 5.0
OPTIMUM_BOX = 4.0
_SCHWEFEL_CONST = 418.9828872724338
_SCHWEFEL_OPT = 420.9687462275036

RESULTS_HEADER = ["strategy", "function", "dim", "seed", "trial", "y", "best_so_far",
                  "normalized_regret", "wall_ms"]
AGGREGATE_HEADER = ["strategy", "function", "trial", "mean_best", "stderr_best",
                    "mean_regret", "stderr_regret"]


def _sphere(z):
    return float(np.sum(z * z))


def _rastrigin(z):
    return float(10.0 * len(z) + np.sum(z * z - 10.0 * np.cos(2.0 * np.pi * z)))


def _rosenbrock(z):
    if len(z) == 1:
        return float((z[0] - 1.0) ** 2)
    return float(np.sum(100.0 * (z[1:] - z[:-1] ** 2) ** 2 + (z[:-1] - 1.0) ** 2))


def _griewank(z):
    z = 100.0 * z
    i = np.arange(1, len(z) + 1)
    return float(1.0 + np.sum(z * z) / 4000.0 - np.prod(np.cos(z / np.sqrt(i))))


def _ackley(z):
    d = len(z)
    return float(-20.0 * np.exp(-0.2 * np.sqrt(np.sum(z * z) / d))
                 - np.exp(np.sum(np.cos(2.0 * np.pi * z)) / d) + 20.0 + np.e)


def _schwefel(z):
    z = 100.0 * z
    return float(_SCHWEFEL_CONST * len(z) - np.sum(z * np.sin(np.sqrt(np.abs(z)))))


# name -> (formula on shifted coordinates, location of the unshifted optimum)
_FUNCTIONS: dict[str, tuple[Callable[[np.ndarray], float], float]] = {
    "sphere": (_sphere, 0.0),
    "rastrigin": (_rastrigin, 0.0),
    "rosenbrock": (_rosenbrock, 1.0),
    "griewank": (_griewank, 0.0),
    "ackley": (_ackley, 0.0),
    "schwefel": (_schwefel, _SCHWEFEL_OPT / 100.0),
}
FUNCTION_NAMES = tuple(_FUNCTIONS)
DEFAULT_FUNCTIONS = ("sphere", "rastrigin", "rosenbrock", "griewank", "ackley")


@dataclass(frozen=True, eq=False)
class BenchmarkFunction:
    """``evaluate`` is the raw function (minimize); ``objective`` its negation (maximize).

    The instance evaluates the base formula at ``x - shift``. Schwefel's
    optimum sits near the box edge, so its instances flip coordinate signs
    instead of translating.
    """

    name: str
    dim: int
    bounds: SearchSpace
    shift: np.ndarray
    argmin: np.ndarray
    known_minimum: float
    signs: np.ndarray

    def evaluate(self, x) -> float:
        x = np.asarray(x, float)
        return _FUNCTIONS[self.name][0](self.signs * x - self.shift)

    def objective(self, x) -> float:
        return -self.evaluate(x)

    def __call__(self, x) -> float:
        return self.objective(x)

    @property
    def __name__(self) -> str:
        return self.name


def make_function(name: str, dim: int, instance_seed: int | None = None) -> BenchmarkFunction:
    """Instance ``instance_seed`` of ``name`` in ``dim`` dimensions; ``None`` is the unshifted form."""
    if name not in _FUNCTIONS:
        raise ConfigError("functions", f"unknown function {name!r}; choose from {FUNCTION_NAMES}")
    if dim < 1:
        raise ConfigError("dims", "dimension must be >= 1")
    formula, center = _FUNCTIONS[name]
    space = SearchSpace.box(dim, -BOUND, BOUND)
    signs = np.ones(dim)
    shift = np.zeros(dim)
    if instance_seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence(instance_seed,
                                                           spawn_key=(FUNCTION_NAMES.index(name), dim)))
        if name == "schwefel":
            signs = rng.choice([-1.0, 1.0], size=dim)
        else:
            shift = rng.uniform(-OPTIMUM_BOX, OPTIMUM_BOX, size=dim) - center
    argmin = signs * (center + shift)
    return BenchmarkFunction(name, dim, space, frozen_array(shift), frozen_array(argmin),
                             formula(np.full(dim, center)), frozen_array(signs))


# -- experiment matrix ---------------------------------------------------------

@dataclass
class ExperimentResult:
    strategy: str
    function: str
    dim: int
    seed: int
    ys: list[float]
    best_so_far: list[float]
    normalized_regret: list[float]
    wall_ms: list[float | None]

    def rows(self) -> Iterable[list]:
        for t, (y, b, r, w) in enumerate(zip(self.ys, self.best_so_far, self.normalized_regret,
                                             self.wall_ms), start=1):
            yield [self.strategy, self.function, self.dim, self.seed, t, repr(y), repr(b), repr(r),
                   "" if w is None else repr(w)]


@dataclass
class ExperimentReport:
    results: list[ExperimentResult]
    failures: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class _Cell:
    order: int
    strategy: StrategySpec
    function: str
    dim: int
    seed: int
    base_seed: int
    budget: int
    normalizer: float
    out_dir: str | None
    record_wall_time: bool
    dump_trajectories: bool
    dump_scores: bool

    @property
    def tag(self) -> str:
        return f"{self.strategy.name}__{self.function}__d{self.dim}__s{self.seed}"


def run_seed(base_seed: int, seed: int) -> list[int]:
    """Entropy of the optimizer stream for experiment seed ``seed``."""
    return [int(base_seed), int(seed)]


class FileRecorder:
    """Appends rollout trajectories (JSON lines) and candidate scores (CSV) to files."""

    def __init__(self, space: SearchSpace, traj_path: Path | None, scores_path: Path | None):
        self.space = space
        self.traj_path = traj_path
        self.scores_path = scores_path
        if scores_path is not None:
            with open(scores_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["trial", "candidate_index", "criterion", "score", "per_step_terms"])
        if traj_path is not None:
            open(traj_path, "w").close()

    def trajectories(self, trial, stage, trajs) -> None:
        if self.traj_path is None:
            return
        with open(self.traj_path, "a") as fh:
            for i, t in enumerate(trajs):
                rec = {"trial": trial, "stage": stage, "index": i}
                rec.update(t.to_json(self.space))
                fh.write(json.dumps(rec) + "\n")

    def scores(self, trial, criterion, selection: Selection) -> None:
        if self.scores_path is None:
            return
        with open(self.scores_path, "a", newline="") as fh:
            w = csv.writer(fh)
            for s in selection.scores:
                terms = "" if s.per_step_terms is None else ";".join(repr(v) for v in s.per_step_terms)
                w.writerow([trial, s.candidate_index, criterion, repr(s.score), terms])


def _regret(f_best: float, f_min: float, normalizer: float) -> float:
    span = normalizer - f_min
    if not span > 0:
        return 0.0
    return float(min(max((f_best - f_min) / span, 0.0), 1.0))


def _run_cell(cell: _Cell) -> tuple[_Cell, ExperimentResult | None, str | None]:
    fn = make_function(cell.function, cell.dim, cell.seed)
    recorder = None
    log_path = None
    if cell.out_dir is not None:
        out = Path(cell.out_dir)
        log_path = out / "logs" / f"{cell.tag}.jsonl"
        if cell.dump_trajectories or cell.dump_scores:
            recorder = FileRecorder(
                fn.bounds,
                out / "trajectories" / f"{cell.tag}.jsonl" if cell.dump_trajectories else None,
                out / "scores" / f"{cell.tag}.csv" if cell.dump_scores else None)
    walls: list[float] = []

    def objective(x):
        return fn.objective(x)
    objective.__name__ = fn.name

    start = time.perf_counter()
    try:
        history = run_study(cell.strategy, objective, fn.bounds, cell.budget,
                            run_seed(cell.base_seed, cell.seed), study_id=cell.tag, log_path=log_path,
                            log_extra={"function": cell.function, "dim": cell.dim, "seed": cell.seed},
                            record_wall_time=cell.record_wall_time, recorder=recorder)
    except StudyAborted as exc:
        return cell, None, f"{type(exc.cause).__name__}: {exc.cause}"
    except Exception as exc:  # one bad cell must not sink the matrix
        logger.exception("cell %s failed", cell.tag)
        return cell, None, f"{type(exc).__name__}: {exc}"
    elapsed = (time.perf_counter() - start) * 1e3
    ys = [o.y for o in history.observations]
    best = list(np.maximum.accumulate(ys))
    regret = [_regret(-b, fn.known_minimum, cell.normalizer) for b in best]
    if cell.record_wall_time and log_path is not None:
        with open(log_path) as fh:
            walls = [json.loads(line)["wall_ms"] for line in fh]
    elif cell.record_wall_time:
        walls = [elapsed / len(ys)] * len(ys)
    wall = walls if walls else [None] * len(ys)
    result = ExperimentResult(cell.strategy.name, cell.function, cell.dim, cell.seed,
                              [float(v) for v in ys], [float(v) for v in best], regret, wall)
    return cell, result, None


def run_experiment(
    strategies: Sequence[StrategySpec],
    functions: Sequence[str],
    seeds: Sequence[int],
    budget: int,
    *,
    dims: Sequence[int] = (4,),
    out_dir: str | Path | None = None,
    workers: int = 1,
    base_seed: int = 0,
    record_wall_time: bool = False,
    dump_trajectories: bool = False,
    dump_scores: bool = False,
    progress: Callable[[str], None] | None = None,
) -> ExperimentReport:
    """Run every (strategy, function, dim, seed) cell and persist the results.

    Rows are streamed to ``results.csv`` as cells finish and the file is
    rewritten in canonical cell order at the end, so its bytes do not depend
    on ``workers``. Failed cells are listed in ``failures.json`` and skipped.
    """
    if not strategies or not functions or not seeds or not dims:
        raise ConfigError("experiment", "strategies, functions, dims and seeds must be non-empty")
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        raise ConfigError("strategies", "strategy names must be unique")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ["logs"] + (["trajectories"] if dump_trajectories else []) + (["scores"] if dump_scores else []):
            (out / sub).mkdir(parents=True, exist_ok=True)

    cells = []
    for dim in dims:
        for fname in functions:
            firsts = [make_function(fname, dim, s).evaluate(x) for s, x in
                      zip(seeds, _first_points(fname, dim, seeds, base_seed, strategies[0]))]
            normalizer = float(np.median(firsts))
            for strat in strategies:
                for seed in seeds:
                    cells.append(_Cell(len(cells), strat, fname, dim, int(seed), base_seed, budget,
                                       normalizer, str(out) if out else None, record_wall_time,
                                       dump_trajectories, dump_scores))

    results: dict[int, ExperimentResult] = {}
    failures: list[dict] = []
    stream = open(out / "results.csv", "w", newline="") if out is not None else None
    writer = csv.writer(stream) if stream is not None else None
    if writer is not None:
        writer.writerow(RESULTS_HEADER)

    def collect(cell: _Cell, result: ExperimentResult | None, error: str | None) -> None:
        if result is None:
            failures.append({"strategy": cell.strategy.name, "function": cell.function,
                             "dim": cell.dim, "seed": cell.seed, "error": error})
            if progress:
                progress(f"FAILED {cell.tag}: {error}")
            return
        results[cell.order] = result
        if writer is not None:
            writer.writerows(result.rows())
            stream.flush()
        if progress:
            progress(f"done {cell.tag} final best {result.best_so_far[-1]:.6g}")

    try:
        if workers > 1 and len(cells) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_cell, c) for c in cells]
                for fut in as_completed(futures):
                    collect(*fut.result())
        else:
            for c in cells:
                collect(*_run_cell(c))
    finally:
        if stream is not None:
            stream.close()

    ordered = [results[i] for i in sorted(results)]
    failures.sort(key=lambda f: (names.index(f["strategy"]), f["function"], f["dim"], f["seed"]))
    if out is not None:
        write_results_csv(out / "results.csv", ordered)
        write_aggregate_csv(out / "aggregate.csv", aggregate(ordered))
        if failures:
            (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return ExperimentReport(ordered, failures)


def _first_points(fname, dim, seeds, base_seed, strategy):
    space = make_function(fname, dim).bounds
    out = []
    for s in seeds:
        h = empty_history(StudyMeta("probe", fname, space))
        out.append(ask(strategy, h, run_seed(base_seed, s)))
    return out


def write_results_csv(path: str | Path, results: Sequence[ExperimentResult]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for r in results:
            w.writerows(r.rows())
    os.replace(tmp, path)


def read_results_csv(path: str | Path) -> list[ExperimentResult]:
    grouped: dict[tuple, ExperimentResult] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            key = (row["strategy"], row["function"], int(row["dim"]), int(row["seed"]))
            res = grouped.get(key)
            if res is None:
                res = grouped[key] = ExperimentResult(*key, [], [], [], [])
            res.ys.append(float(row["y"]))
            res.best_so_far.append(float(row["best_so_far"]))
            res.normalized_regret.append(float(row["normalized_regret"]))
            res.wall_ms.append(float(row["wall_ms"]) if row["wall_ms"] else None)
    return list(grouped.values())


# -- aggregation ---------------------------------------------------------------

@dataclass(frozen=True)
class AggregateRow:
    strategy: str
    function: str
    trial: int
    mean_best: float
    stderr_best: float
    mean_regret: float
    stderr_regret: float

    def as_list(self) -> list:
        return [self.strategy, self.function, self.trial, repr(self.mean_best), repr(self.stderr_best),
                repr(self.mean_regret), repr(self.stderr_regret)]


def _stderr(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    if n < 2:
        return np.zeros(values.shape[1:])
    return values.std(axis=0, ddof=1) / math.sqrt(n)


def aggregate(results: Sequence[ExperimentResult]) -> list[AggregateRow]:
    """Per-trial mean and standard error across seeds of each (strategy, function).

    When results span several dimensions the function label gets a ``_d<dim>``
    suffix so cells of different sizes are never pooled.
    """
    multi_dim = len({r.dim for r in results}) > 1
    groups: dict[tuple[str, str], list[ExperimentResult]] = {}
    for r in results:
        label = f"{r.function}_d{r.dim}" if multi_dim else r.function
        groups.setdefault((r.strategy, label), []).append(r)
    rows = []
    for (strategy, label), members in groups.items():
        horizon = min(len(m.best_so_far) for m in members)
        best = np.array([m.best_so_far[:horizon] for m in members])
        regret = np.array([m.normalized_regret[:horizon] for m in members])
        mb, sb = best.mean(axis=0), _stderr(best)
        mr, sr = regret.mean(axis=0), _stderr(regret)
        for t in range(horizon):
            rows.append(AggregateRow(strategy, label, t + 1, float(mb[t]), float(sb[t]),
                                     float(mr[t]), float(sr[t])))
    return rows


def write_aggregate_csv(path: str | Path, rows: Sequence[AggregateRow],
                        extra: Sequence[tuple[str, Sequence]] = ()) -> None:
    """Write aggregate rows; ``extra`` prepends key columns such as the horizon."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([name for name, _ in extra] + AGGREGATE_HEADER)
        for i, row in enumerate(rows):
            w.writerow([vals[i] for _, vals in extra] + row.as_list())


def final_rows(rows: Sequence[AggregateRow]) -> dict[tuple[str, str], AggregateRow]:
    """Last-trial aggregate row per (strategy, function)."""
    out: dict[tuple[str, str], AggregateRow] = {}
    for r in rows:
        key = (r.strategy, r.function)
        if key not in out or r.trial > out[key].trial:
            out[key] = r
    return out


@dataclass(frozen=True)
class FunctionComparison:
    function: str
    diff: float
    pooled_stderr: float

    @property
    def verdict(self) -> str:
        if self.diff > self.pooled_stderr:
            return "better"
        if abs(self.diff) <= self.pooled_stderr:
            return "match"
        return "worse"


def compare_final(rows: Sequence[AggregateRow], challenger: str, baseline: str) -> list[FunctionComparison]:
    """Final mean best-so-far of ``challenger`` minus ``baseline``, per function."""
    final = final_rows(rows)
    functions = sorted({f for s, f in final if s == challenger} & {f for s, f in final if s == baseline})
    out = []
    for f in functions:
        a, b = final[(challenger, f)], final[(baseline, f)]
        out.append(FunctionComparison(f, a.mean_best - b.mean_best,
                                      math.hypot(a.stderr_best, b.stderr_best)))
    return out
