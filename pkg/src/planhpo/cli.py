"""Command-line driver: run experiment matrices, sweep horizons, plot, replay logs.

Example config::

    {
      "planner": {"n_seed": 100, "k_refine": 50, "horizon": 5},
      "strategies": [
        {"name": "ei", "criterion": "none"},
        {"name": "max50", "criterion": "max_k"}
      ],
      "functions": ["sphere", "rastrigin"],
      "dims": [4],
      "seeds": 20,
      "T": 100
    }

``seeds`` is either a list of integers or a count. Every key is optional.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .bench import (
    AGGREGATE_HEADER,
    DEFAULT_FUNCTIONS,
    FUNCTION_NAMES,
    aggregate,
    make_function,
    run_experiment,
    write_aggregate_csv,
)
from .core import ConfigError, PlanHPOError, PlannerConfig, ProtocolError, SearchSpace
from .optimizer import StrategySpec, replay

logger = logging.getLogger("planhpo")

DEFAULT_HORIZONS = (2, 3, 5, 10)
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
_RUN_KEYS = {"planner", "strategies", "functions", "dims", "seeds", "T", "out", "workers",
             "base_seed", "dump_trajectories", "dump_scores", "record_wall_time", "horizons"}


@dataclass(frozen=True)
class RunConfig:
    strategies: tuple[StrategySpec, ...]
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    functions: tuple[str, ...] = DEFAULT_FUNCTIONS
    dims: tuple[int, ...] = (4,)
    seeds: tuple[int, ...] = tuple(range(20))
    T: int = 100
    out: str = "results"
    workers: int = 1
    base_seed: int = 0
    dump_trajectories: bool = False
    dump_scores: bool = False
    record_wall_time: bool = False
    horizons: tuple[int, ...] = DEFAULT_HORIZONS

    def __post_init__(self) -> None:
        if not self.strategies:
            raise ConfigError("strategies", "at least one strategy is required")
        names = [s.name for s in self.strategies]
        if len(set(names)) != len(names):
            raise ConfigError("strategies", f"duplicate strategy names in {names}")
        if not self.functions:
            raise ConfigError("functions", "at least one function is required")
        for f in self.functions:
            if f not in FUNCTION_NAMES:
                raise ConfigError("functions", f"unknown function {f!r}; choose from {FUNCTION_NAMES}")
        if not self.dims or any(d < 1 for d in self.dims):
            raise ConfigError("dims", "dimensions must be a non-empty list of integers >= 1")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "seeds must be distinct")
        if self.T < 1:
            raise ConfigError("T", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if not 0 <= self.base_seed < 2**64:
            raise ConfigError("base_seed", "must be an unsigned 64-bit integer")
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise ConfigError("horizons", "horizons must be a non-empty list of integers >= 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        if not isinstance(data, Mapping):
            raise ConfigError("config", "top level must be a JSON object")
        for key in data:
            if key not in _RUN_KEYS:
                raise ConfigError(key, "unknown setting")
        planner_data = data.get("planner", {})
        if not isinstance(planner_data, Mapping):
            raise ConfigError("planner", "must be an object")
        planner = PlannerConfig.from_dict(planner_data, prefix="planner.")
        raw = data.get("strategies")
        if raw is None:
            strategies = (StrategySpec(_default_name(planner), planner),)
        else:
            if not isinstance(raw, list):
                raise ConfigError("strategies", "must be a list")
            strategies = tuple(StrategySpec.from_dict(s, planner, prefix=f"strategies[{i}].")
                               if isinstance(s, Mapping) else _bad(f"strategies[{i}]", "must be an object")
                               for i, s in enumerate(raw))
        kwargs: dict[str, Any] = {"strategies": strategies, "planner": planner}
        if "functions" in data:
            kwargs["functions"] = tuple(_str_list(data["functions"], "functions"))
        if "dims" in data:
            kwargs["dims"] = tuple(_int_list(data["dims"], "dims"))
        if "seeds" in data:
            seeds = data["seeds"]
            if isinstance(seeds, int) and not isinstance(seeds, bool):
                if seeds < 1:
                    raise ConfigError("seeds", "seed count must be >= 1")
                kwargs["seeds"] = tuple(range(seeds))
            else:
                kwargs["seeds"] = tuple(_int_list(seeds, "seeds"))
        if "horizons" in data:
            kwargs["horizons"] = tuple(_int_list(data["horizons"], "horizons"))
        for key in ("T", "workers", "base_seed"):
            if key in data:
                kwargs[key] = _int(data[key], key)
        for key in ("dump_trajectories", "dump_scores", "record_wall_time"):
            if key in data:
                if not isinstance(data[key], bool):
                    raise ConfigError(key, "must be true or false")
                kwargs[key] = data[key]
        if "out" in data:
            if not isinstance(data["out"], str) or not data["out"]:
                raise ConfigError("out", "must be a non-empty path string")
            kwargs["out"] = data["out"]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "planner": self.planner.to_dict(),
            "strategies": [s.to_dict() for s in self.strategies],
            "functions": list(self.functions),
            "dims": list(self.dims),
            "seeds": list(self.seeds),
            "T": self.T,
            "out": self.out,
            "workers": self.workers,
            "base_seed": self.base_seed,
            "dump_trajectories": self.dump_trajectories,
            "dump_scores": self.dump_scores,
            "record_wall_time": self.record_wall_time,
            "horizons": list(self.horizons),
        }


def _bad(name: str, msg: str):
    raise ConfigError(name, msg)


def _default_name(p: PlannerConfig) -> str:
    if p.criterion == "none":
        return p.acquisition
    return f"{p.criterion}{p.k_refine}_h{p.horizon}_{p.acquisition}"


def _int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    return value


def _int_list(value: Any, name: str) -> list[int]:
    if not isinstance(value, list):
        raise ConfigError(name, "expected a list of integers")
    return [_int(v, name) for v in value]


def _str_list(value: Any, name: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(name, "expected a list of strings")
    return list(value)


def load_config(path: str | Path | None, overrides: argparse.Namespace) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    cfg = RunConfig.from_dict(data)
    changes: dict[str, Any] = {}
    if getattr(overrides, "out", None):
        changes["out"] = overrides.out
    if getattr(overrides, "workers", None) is not None:
        changes["workers"] = overrides.workers
    if getattr(overrides, "seed", None) is not None:
        changes["base_seed"] = overrides.seed
    if getattr(overrides, "dump_trajectories", False):
        changes["dump_trajectories"] = True
    if getattr(overrides, "dump_scores", False):
        changes["dump_scores"] = True
    return replace(cfg, **changes) if changes else cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return out


def _progress(msg: str) -> None:
    logger.info(msg)


def _run_matrix(cfg: RunConfig, strategies: Sequence[StrategySpec], out: Path):
    return run_experiment(strategies, cfg.functions, cfg.seeds, cfg.T, dims=cfg.dims, out_dir=out,
                          workers=cfg.workers, base_seed=cfg.base_seed,
                          record_wall_time=cfg.record_wall_time,
                          dump_trajectories=cfg.dump_trajectories, dump_scores=cfg.dump_scores,
                          progress=_progress)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args)
    out = _prepare_out(cfg)
    report = _run_matrix(cfg, cfg.strategies, out)
    if report.failures:
        print(f"{len(report.failures)} cell(s) failed; see {out / 'failures.json'}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"wrote {out / 'results.csv'} and {out / 'aggregate.csv'}")
    return EXIT_OK


def horizon_strategies(strategies: Sequence[StrategySpec], h: int) -> list[StrategySpec]:
    """Copies of ``strategies`` at horizon ``h``, renamed with an ``_h<h>`` suffix."""
    return [StrategySpec(f"{s.name}_h{h}", s.planner.with_(horizon=h), s.uses_seed_set, s.prior)
            for s in strategies]


def cmd_ablate_horizon(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args)
    if args.horizons:
        try:
            hs = tuple(int(v) for v in args.horizons.split(","))
        except ValueError:
            raise ConfigError("horizons", f"expected comma-separated integers, got {args.horizons!r}") from None
        cfg = replace(cfg, horizons=hs)
    for h in cfg.horizons:  # validate every variant before any work starts
        horizon_strategies(cfg.strategies, h)
    out = _prepare_out(cfg)
    merged_rows, hcol = [], []
    failed = 0
    for h in cfg.horizons:
        report = _run_matrix(cfg, horizon_strategies(cfg.strategies, h), out / f"h{h}")
        failed += len(report.failures)
        rows = aggregate(report.results)
        merged_rows.extend(rows)
        hcol.extend([h] * len(rows))
    write_aggregate_csv(out / "horizon_aggregate.csv", merged_rows, extra=[("h", hcol)])
    if failed:
        print(f"{failed} cell(s) failed; see the failures.json files under {out}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"wrote {out / 'horizon_aggregate.csv'}")
    return EXIT_OK


class MalformedCSV(ValueError):
    pass


def read_aggregate_csv(path: str | Path) -> list[dict]:
    """Parse an aggregate CSV (optionally with a leading ``h`` column), reporting bad lines."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCSV(f"{path}: line 1: empty file") from None
        expected = [header[0]] + AGGREGATE_HEADER if header[:1] == ["h"] else AGGREGATE_HEADER
        if header != expected:
            raise MalformedCSV(f"{path}: line 1: unexpected header {','.join(header)}")
        rows = []
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise MalformedCSV(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            try:
                rec["trial"] = int(rec["trial"])
                if "h" in rec:
                    rec["h"] = int(rec["h"])
                for key in AGGREGATE_HEADER[3:]:
                    rec[key] = float(rec[key])
                    if not math.isfinite(rec[key]):
                        raise ValueError(f"non-finite {key}")
            except ValueError as exc:
                raise MalformedCSV(f"{path}: line {line}: {exc}") from None
            rows.append(rec)
    if not rows:
        raise MalformedCSV(f"{path}: line 2: no data rows")
    return rows


def render_plots(rows: Sequence[dict], out: Path, metric: str = "best") -> list[Path]:
    """One SVG per function with a mean curve and stderr band per strategy.

    Each series is an SVG group whose id is ``series-<label>``.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mean_key, err_key = ("mean_best", "stderr_best") if metric == "best" else ("mean_regret", "stderr_regret")
    by_function: dict[str, dict[str, list[dict]]] = {}
    for r in rows:
        label = f"{r['strategy']} (h={r['h']})" if "h" in r and not r["strategy"].endswith(f"_h{r['h']}") \
            else r["strategy"]
        by_function.setdefault(r["function"], {}).setdefault(label, []).append(r)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "planhpo", "svg.fonttype": "none"}):
        for function in sorted(by_function):
            fig, ax = plt.subplots(figsize=(6, 4))
            for i, (label, series) in enumerate(by_function[function].items()):
                series = sorted(series, key=lambda r: r["trial"])
                t = np.array([r["trial"] for r in series])
                m = np.array([r[mean_key] for r in series])
                e = np.array([r[err_key] for r in series])
                color = f"C{i % 10}"
                band = ax.fill_between(t, m - e, m + e, color=color, alpha=0.2, linewidth=0)
                (line,) = ax.plot(t, m, color=color, label=label)
                line.set_gid(f"series-{label}")
                band.set_gid(f"band-{label}")
            ax.set_title(function)
            ax.set_xlabel("trial")
            ax.set_ylabel("mean best so far" if metric == "best" else "mean normalized regret")
            ax.legend(loc="best", fontsize="small")
            fig.tight_layout()
            path = out / f"{_safe(function)}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def cmd_plot(args: argparse.Namespace) -> int:
    try:
        rows = read_aggregate_csv(args.csv)
    except OSError as exc:
        print(f"error: cannot read {args.csv}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    except MalformedCSV as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path(args.csv).parent / "plots"
    for path in render_plots(rows, out, args.metric):
        print(path)
    return EXIT_OK


def _space_for(records: Sequence[Mapping[str, Any]]) -> SearchSpace:
    first = records[0]
    if "function" in first and "dim" in first:
        return make_function(first["function"], int(first["dim"])).bounds
    return SearchSpace.box(len(first["x"]), -5.0, 5.0)


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        with open(args.log) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        print(f"error: cannot read {args.log}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: {args.log}: invalid JSON line ({exc.msg})", file=sys.stderr)
        return EXIT_CONFIG
    if not records:
        print(f"error: {args.log}: no records", file=sys.stderr)
        return EXIT_CONFIG
    try:
        history = replay(_space_for(records), records)
    except (PlanHPOError, ValueError, KeyError) as exc:
        print(f"error: {args.log}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"trials": len(history), "best_value": history.best_value,
                      "best_x": [float(v) for v in history.best_x]}))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors share the config-error exit code
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="planhpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-cell progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_flags(p):
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        p.add_argument("--workers", type=_positive, metavar="N", help="parallel experiment cells")
        p.add_argument("--seed", type=_u64, metavar="U64", help="base seed (overrides config)")
        p.add_argument("--dump-trajectories", action="store_true", help="write rollout trajectories")
        p.add_argument("--dump-scores", action="store_true", help="write per-candidate acquisition scores")

    p = sub.add_parser("run", help="run an experiment matrix")
    experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate-horizon", help="rerun the matrix once per rollout horizon")
    experiment_flags(p)
    p.add_argument("--horizons", metavar="H,H,...", help="comma-separated horizons (default 2,3,5,10)")
    p.set_defaults(func=cmd_ablate_horizon)

    p = sub.add_parser("plot", help="render SVG curves from an aggregate CSV")
    p.add_argument("csv", metavar="AGGREGATE_CSV")
    p.add_argument("--out", metavar="DIR", help="output directory (default: plots/ next to the CSV)")
    p.add_argument("--metric", choices=("best", "regret"), default="best")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("replay", help="rebuild a study from its JSON-lines log and check it")
    p.add_argument("log", metavar="LOG_JSONL")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
