"""Acceptance criteria, one test per criterion.

Each test records ``criterion`` and ``detail`` properties; conftest prints a
single PASS/FAIL/SKIP line per criterion at the end of the session. The
directional experiments (7, 8) read stored results under ``experiments/``
and only recompute them with ``--run-slow``.
"""

from __future__ import annotations

import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from planhpo.acquisition import ei_array, evaluate_ei, evaluate_plan
from planhpo.bench import aggregate, compare_final, final_rows, read_results_csv, run_experiment
from planhpo.candgen import generate_seed_set, rank_rollouts, refine
from planhpo.cli import main as cli_main
from planhpo.core import PlannerConfig, SearchSpace, StudyMeta, denormalize, empty_history
from planhpo.optimizer import StrategySpec, ask, tell
from planhpo.policy import PolicyState
from planhpo.rollout import SampleCounter, rollout_batch
from planhpo.surrogate import fantasize, predict_arrays

from conftest import random_gp
from oracles import DenseGP, ei_monte_carlo, plan_quadrature_h2

ROOT = Path(__file__).resolve().parents[1]
EXPERIMENTS = ROOT / "experiments"

# tolerances and budgets, pinned
TOL_SURROGATE = 1e-8
TOL_EI_MC = 2e-3
TOL_QUADRATURE = 2e-2
LIMIT_1_S = 10.0
LIMIT_2_S = 30.0
LIMIT_3_S = 60.0
LIMIT_5_S = 120.0
LIMIT_9_S = 300.0


def _mark(record_property, n, detail):
    record_property("criterion", n)
    record_property("detail", detail)


def test_criterion_1_surrogate_oracle(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_fan = worst_pred = 0.0
    for i in range(100):
        dim, n = int(rng.integers(1, 7)), int(rng.integers(1, 30))
        variant = ("matern52", "squared_exponential")[i % 2]
        gp = random_gp(rng, n, dim, variant=variant)
        oracle = DenseGP(gp.kernel, gp.train_x, gp.train_y, gp.jitter)
        xq = rng.random((10, dim))
        noise = gp.kernel.noise_variance

        om, ov = oracle.latent(xq)
        mu, var = predict_arrays(gp, xq)
        worst_pred = max(worst_pred,
                         float(np.max(np.abs(mu - gp.from_standard(om)) / gp.target_std)),
                         float(np.max(np.abs(var / gp.target_std ** 2 - (ov + noise)))))

        xt = rng.random(dim)
        yt = float(rng.normal(gp.target_mean, 2 * gp.target_std))
        fan = fantasize(gp, xt, yt)
        om, ov = oracle.add(xt[None, :], gp.to_standard(yt)).latent(xq)
        mu, var = predict_arrays(fan, xq)
        worst_fan = max(worst_fan,
                        float(np.max(np.abs(mu - gp.from_standard(om)) / gp.target_std)),
                        float(np.max(np.abs(var / gp.target_std ** 2 - (ov + noise)))))
    elapsed = time.perf_counter() - start
    _mark(record_property, 1, f"fantasize err {worst_fan:.1e}, predict err {worst_pred:.1e}, "
                              f"tol {TOL_SURROGATE:.0e}, {elapsed:.1f}s")
    assert worst_fan <= TOL_SURROGATE and worst_pred <= TOL_SURROGATE
    assert elapsed < LIMIT_1_S


def test_criterion_2_ei_monte_carlo(record_property):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    grid = list(itertools.product((-1.0, 0.0, 0.4, 2.0), (0.0, 0.01, 0.3, 1.0), (0.0, 0.5)))
    mu, sigma, inc = (np.array(v) for v in zip(*grid))
    closed = ei_array(mu, sigma ** 2, inc)
    mc = np.array([ei_monte_carlo(m, s, y, 10 ** 6, rng) for m, s, y in grid])
    err = float(np.max(np.abs(closed - mc)))
    elapsed = time.perf_counter() - start
    _mark(record_property, 2, f"max |EI - MC| {err:.1e} over {len(grid)} points, tol {TOL_EI_MC:.0e}, "
                              f"{elapsed:.1f}s")
    assert err <= TOL_EI_MC
    assert elapsed < LIMIT_2_S


def test_criterion_3_degeneracy(record_property):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    plan_mismatch = multiset_mismatch = 0
    for i in range(50):
        dim = int(rng.integers(1, 5))
        gp = random_gp(rng, int(rng.integers(2, 20)), dim)
        inc = float(gp.from_standard(gp.train_y).max())
        cands = rng.random((int(rng.integers(1, 40)), dim))
        policy = PolicyState(gp, np.random.default_rng(i), proposal_count=64)
        a = evaluate_plan(cands, policy, inc, 1, 16, np.random.SeedSequence(i))
        b = evaluate_ei(cands, gp, inc)
        plan_mismatch += a.index != b.index

        seeds = generate_seed_set(policy, 30, np.random.default_rng(i))
        trajs = [g[0] for g in rollout_batch(policy, seeds, 1, 1, np.random.SeedSequence(i))]
        ranked = rank_rollouts(trajs)
        k = int(rng.integers(1, 31))
        sets = [sorted(map(tuple, refine(c, ranked, seeds, k).points)) for c in ("first_k", "max_k", "last_k")]
        multiset_mismatch += not (sets[0] == sets[1] == sets[2])
    elapsed = time.perf_counter() - start
    _mark(record_property, 3, f"plan/EI argmax mismatches {plan_mismatch}/50, "
                              f"criterion multiset mismatches {multiset_mismatch}/50, {elapsed:.1f}s")
    assert plan_mismatch == 0 and multiset_mismatch == 0
    assert elapsed < LIMIT_3_S


@pytest.mark.parametrize("c,d,h", [(10, 4, 3), (50, 64, 5)])
def test_criterion_4_accounting(record_property, c, d, h):
    rng = np.random.default_rng(c)
    gp = random_gp(rng, 12, 4)
    inc = float(gp.from_standard(gp.train_y).max())
    plan_counter = SampleCounter()
    evaluate_plan(rng.random((c, 4)), PolicyState(gp, np.random.default_rng(0), proposal_count=64),
                  inc, h, d, np.random.SeedSequence(1), counter=plan_counter)

    space = SearchSpace.box(4, -5.0, 5.0)
    hist = empty_history(StudyMeta("acc", "quad", space))
    for x in rng.random((6, 4)):
        hist = tell(hist, denormalize(x, space), float(-np.sum((x - 0.3) ** 2)))
    planner = PlannerConfig(n_seed=c, k_refine=min(5, c), horizon=h, n_rollouts=d, criterion="max_k",
                            acquisition="ei", proposal_count=64, hyper_restarts=1, hyper_max_evals=20)
    refine_counter = SampleCounter()
    ask(StrategySpec("acc", planner), hist, 0, counter=refine_counter)

    got_plan, got_ref = plan_counter.snapshot(), refine_counter.snapshot()
    _mark(record_property, 4, f"(|C|,d,h)=({c},{d},{h}): plan value samples {got_plan['value_samples']} "
                              f"(want {c * d * h}), refinement trajectories {got_ref['trajectories']} "
                              f"x length {got_ref['value_samples'] // max(got_ref['trajectories'], 1)} "
                              f"(want {c} x {h})")
    assert got_plan == {"value_samples": c * d * h, "suggestions": c * d * (h - 1), "trajectories": c * d}
    assert got_ref == {"value_samples": c * h, "suggestions": c * (h - 1), "trajectories": c}


def test_criterion_5_quadrature(record_property):
    rng = np.random.default_rng(55)
    gp = random_gp(rng, 8, 2)
    pool = rng.random((8, 2))
    cands = rng.random((3, 2))
    inc = float(gp.from_standard(gp.train_y).max())
    start = time.perf_counter()
    policy = PolicyState(gp, np.random.default_rng(0), 4.0, len(pool), 0.1, proposals=pool)
    est = evaluate_plan(cands, policy, inc, 2, 4096, np.random.SeedSequence(5)).score_array()
    ref = plan_quadrature_h2(gp, cands, pool, 4.0, 0.1, inc, nodes=64)
    elapsed = time.perf_counter() - start
    err = float(np.max(np.abs(est - ref)))
    _mark(record_property, 5, f"max |plan - quadrature| {err:.1e} (values {np.round(ref, 4).tolist()}), "
                              f"tol {TOL_QUADRATURE:.0e}, {elapsed:.1f}s")
    assert err <= TOL_QUADRATURE
    assert elapsed < LIMIT_5_S


def test_criterion_6_determinism(record_property, tmp_path):
    planner = PlannerConfig(n_seed=12, k_refine=4, horizon=3, n_rollouts=4, proposal_count=32,
                            hyper_restarts=1, hyper_max_evals=20)
    strategies = [StrategySpec("ei", planner.with_(criterion="none")),
                  StrategySpec("max", planner.with_(criterion="max_k")),
                  StrategySpec("plan", planner.with_(acquisition="plan"))]
    outputs = {}
    for workers in (1, 8):
        out = tmp_path / f"w{workers}"
        run_experiment(strategies, ["sphere", "ackley"], [0, 1], 6, out_dir=out, workers=workers)
        outputs[workers] = ((out / "results.csv").read_bytes(), (out / "aggregate.csv").read_bytes())
    again = tmp_path / "again"
    run_experiment(strategies, ["sphere", "ackley"], [0, 1], 6, out_dir=again, workers=1)
    same_workers = outputs[1] == outputs[8]
    same_rerun = (again / "results.csv").read_bytes() == outputs[1][0]
    _mark(record_property, 6, f"workers 1 vs 8 identical: {same_workers}, rerun identical: {same_rerun}, "
                              f"{len(outputs[1][0])} bytes")
    assert same_workers and same_rerun


def _complete(results_dir: Path, cells: int) -> bool:
    path = results_dir / "results.csv"
    if not (results_dir / "aggregate.csv").exists() or not path.exists():
        return False
    return len(read_results_csv(path)) == cells


def _experiment(name: str, request, argv: list[str], cells: dict[Path, int]):
    if all(_complete(p, n) for p, n in cells.items()):
        return
    if not request.config.getoption("--run-slow"):
        pytest.skip(f"stored {name} results incomplete; rerun with --run-slow or `planhpo {' '.join(argv)}`")
    assert cli_main(argv) == 0


@pytest.mark.slow
def test_criterion_7_fig5_ordering(record_property, request):
    _mark(record_property, 7, "stored results incomplete; pass --run-slow to recompute")
    out = EXPERIMENTS / "fig5"
    _experiment("fig5", request, ["run", "--config", str(EXPERIMENTS / "fig5.json"), "--out", str(out)],
                {out: 2 * 5 * 20})
    rows = aggregate(read_results_csv(out / "results.csv"))
    comps = compare_final(rows, "max50_h5", "ei")
    verdicts = [c.verdict for c in comps]
    better, match = verdicts.count("better"), verdicts.count("match")
    table = ", ".join(f"{c.function} {c.verdict} ({c.diff:+.3g} vs {c.pooled_stderr:.2g})" for c in comps)
    _mark(record_property, 7, f"better {better}, match {match} (need >=2 and >=4 total): {table}")
    assert len(comps) == 5
    assert better >= 2 and better + match >= 4


def _final_performance(results_path: Path, strategy: str) -> dict[str, float]:
    final = final_rows(aggregate([r for r in read_results_csv(results_path) if r.strategy == strategy]))
    return {f: 1.0 - row.mean_regret for (s, f), row in final.items()}


@pytest.mark.slow
def test_criterion_8_horizon_ablation(record_property, request):
    _mark(record_property, 8, "stored results incomplete; pass --run-slow to recompute")
    fig5, horizon = EXPERIMENTS / "fig5", EXPERIMENTS / "horizon"
    _experiment("horizon", request, ["ablate-horizon", "--config", str(EXPERIMENTS / "horizon.json"),
                                     "--horizons", "2,10", "--out", str(horizon)],
                {horizon / "h2": 5 * 20, horizon / "h10": 5 * 20})
    _experiment("fig5", request, ["run", "--config", str(EXPERIMENTS / "fig5.json"), "--out", str(fig5)],
                {fig5: 2 * 5 * 20})
    perf = {2: _final_performance(horizon / "h2" / "results.csv", "max50_h2"),
            5: _final_performance(fig5 / "results.csv", "max50_h5"),
            10: _final_performance(horizon / "h10" / "results.csv", "max50_h10")}
    mean = {h: float(np.mean(list(p.values()))) for h, p in perf.items()}
    _mark(record_property, 8, "mean final 1-regret " + ", ".join(f"h={h}: {v:.4f}" for h, v in mean.items())
          + " (pass if h=10 <= max of h=2, h=5)")
    assert all(len(p) == 5 for p in perf.values())
    assert mean[10] <= max(mean[2], mean[5])


def test_criterion_9_invariant_suite(record_property):
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-m", "invariant", "-q", "-p", "no:cacheprovider",
         "--ignore", str(Path(__file__))],
        cwd=ROOT, capture_output=True, text=True, timeout=2 * LIMIT_9_S,
    )
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    _mark(record_property, 9, f"{summary}, {elapsed:.0f}s (limit {LIMIT_9_S:.0f}s)")
    assert proc.returncode == 0, proc.stdout[-2000:]
    assert elapsed < LIMIT_9_S
