from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from planhpo.acquisition import ei, ei_array, evaluate_ei, evaluate_plan, evaluate_ucb, plan_terms, ucb
from planhpo.core import PredictiveDistribution
from planhpo.policy import PolicyState
from planhpo.rollout import rollout_batch
from planhpo.surrogate import KernelConfig, fit_arrays, predict_arrays

from conftest import random_gp
from oracles import ei_formula, ei_monte_carlo, plan_quadrature_h2


def _policy(gp, q=32, **kw):
    return PolicyState(gp, np.random.default_rng(0), proposal_count=q, **kw)


class TestEI:
    def test_examples(self):
        assert ei(PredictiveDistribution(0.0, 1e-30), 0.0) == pytest.approx(0.0, abs=1e-14)
        assert ei(PredictiveDistribution(2.0, 0.0), 1.0) == 1.0
        assert ei(PredictiveDistribution(0.0, 1.0), 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
        assert ei(PredictiveDistribution(0.0, 0.0), 1.0) == 0.0

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        for mu, s, inc in [(0.0, 1.0, 0.0), (0.3, 0.2, 0.5), (-1.0, 0.7, 0.0)]:
            assert ei(PredictiveDistribution(mu, s * s), inc) == pytest.approx(
                ei_monte_carlo(mu, s, inc, 200_000, rng), abs=5e-3)

    def test_no_incumbent_scores_mean(self):
        assert ei(PredictiveDistribution(1.5, 2.0), -math.inf) == 1.5

    def test_matches_scipy_formula(self, rng):
        mu, s, inc = rng.normal(size=200), rng.uniform(0, 3, 200), rng.normal(size=200)
        ref = [ei_formula(a, b, c) for a, b, c in zip(mu, s, inc)]
        np.testing.assert_allclose(ei_array(mu, s * s, inc), ref, rtol=1e-10, atol=1e-14)

    @pytest.mark.invariant
    @given(st.floats(-50, 50), st.floats(0, 10), st.floats(-50, 50), st.floats(0, 5))
    def test_nonnegative_and_monotone_in_mean(self, mu, sigma, inc, step):
        a = ei(PredictiveDistribution(mu, sigma * sigma), inc)
        b = ei(PredictiveDistribution(mu + step, sigma * sigma), inc)
        assert a >= 0 and b >= a - 1e-12

    @pytest.mark.invariant
    @given(st.floats(0.01, 10), st.floats(-10, 10))
    def test_vanishes_far_below_incumbent(self, sigma, inc):
        assert ei(PredictiveDistribution(inc - 60 * sigma, sigma * sigma), inc) < 1e-12


class TestUCB:
    def test_examples(self):
        assert ucb(PredictiveDistribution(1.0, 4.0), 0.0) == 1.0
        assert ucb(PredictiveDistribution(1.0, 0.0), 9.0) == 1.0
        assert ucb(PredictiveDistribution(1.0, 4.0), 1.0) == 3.0
        with pytest.raises(ValueError):
            ucb(PredictiveDistribution(1.0, 4.0), -1.0)

    def test_evaluate_ucb_brute_force(self, rng):
        gp = random_gp(rng, 10, 2)
        pts = rng.random((30, 2))
        sel = evaluate_ucb(pts, gp, 2.0)
        m, v = predict_arrays(gp, pts)
        assert sel.index == int(np.argmax(m + math.sqrt(2.0) * np.sqrt(v)))


class TestEvaluateEI:
    def test_singleton(self, rng):
        gp = random_gp(rng, 5, 2)
        sel = evaluate_ei(np.array([[0.2, 0.3]]), gp, 0.0)
        assert sel.index == 0 and np.array_equal(sel.x, [0.2, 0.3])

    def test_incumbent_point_never_selected(self):
        x = np.array([[0.2, 0.2], [0.8, 0.8]])
        gp = fit_arrays(x, np.array([1.0, 0.0]), KernelConfig("matern52", (0.3, 0.3), 1.0, 0.0))
        cands = np.array([[0.2, 0.2], [0.5, 0.5]])
        sel = evaluate_ei(cands, gp, 1.0)
        assert sel.scores[0].score < 1e-6 < sel.scores[1].score and sel.index == 1

    def test_ties_pick_lowest_index(self, rng):
        gp = random_gp(rng, 5, 2)
        p = rng.random(2)
        assert evaluate_ei(np.array([p, p, p]), gp, 0.0).index == 0

    @pytest.mark.invariant
    @given(st.integers(0, 2**32 - 1))
    def test_brute_force_score_and_sort(self, seed):
        rng = np.random.default_rng(seed)
        gp = random_gp(rng, 8, 3)
        pts = rng.random((int(rng.integers(1, 40)), 3))
        inc = float(gp.from_standard(gp.train_y).max())
        sel = evaluate_ei(pts, gp, inc)
        m, v = predict_arrays(gp, pts)
        scores = [ei_formula(a, math.sqrt(b), inc) for a, b in zip(m, v)]
        order = sorted(range(len(pts)), key=lambda i: (-scores[i], i))
        np.testing.assert_allclose(sel.score_array(), scores, rtol=1e-9, atol=1e-12)
        assert sel.index == order[0] or scores[sel.index] == pytest.approx(scores[order[0]], rel=1e-12)


class TestPlan:
    def test_horizon_one_is_ei(self, rng):
        gp = random_gp(rng, 10, 2)
        pts = rng.random((20, 2))
        inc = float(gp.from_standard(gp.train_y).max())
        a = evaluate_plan(pts, _policy(gp), inc, 1, 8, np.random.SeedSequence(0))
        b = evaluate_ei(pts, gp, inc)
        assert a.index == b.index
        np.testing.assert_array_equal(a.score_array(), b.score_array())
        assert a.trajectories is None

    def test_quadrature_small(self, rng):
        gp = random_gp(rng, 8, 2)
        pool = rng.random((6, 2))
        cands = rng.random((2, 2))
        inc = float(gp.from_standard(gp.train_y).max())
        policy = PolicyState(gp, np.random.default_rng(0), 4.0, len(pool), 0.1, proposals=pool)
        sel = evaluate_plan(cands, policy, inc, 2, 1024, np.random.SeedSequence(2))
        ref = plan_quadrature_h2(gp, cands, pool, 4.0, 0.1, inc, nodes=32)
        np.testing.assert_allclose(sel.score_array(), ref, atol=5e-2)

    def test_fantasized_incumbent_only_lowers_terms(self, rng):
        gp = random_gp(rng, 10, 2)
        pts = rng.random((5, 2))
        inc = float(gp.from_standard(gp.train_y).max())
        real = evaluate_plan(pts, _policy(gp), inc, 4, 6, np.random.SeedSequence(3))
        fan = evaluate_plan(pts, _policy(gp), inc, 4, 6, np.random.SeedSequence(3), fantasized_incumbent=True)
        for a, b in zip(real.scores, fan.scores):
            assert a.per_step_terms[0] == b.per_step_terms[0]
            assert all(y <= x + 1e-12 for x, y in zip(a.per_step_terms, b.per_step_terms))

    @pytest.mark.invariant
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
    def test_score_structure(self, seed, h, d):
        rng = np.random.default_rng(seed)
        gp = random_gp(rng, int(rng.integers(2, 10)), 2)
        pts = rng.random((int(rng.integers(1, 6)), 2))
        inc = float(gp.from_standard(gp.train_y).max())
        sel = evaluate_plan(pts, _policy(gp, q=16), inc, h, d, np.random.SeedSequence(seed))
        m, v = predict_arrays(gp, pts)
        for s in sel.scores:
            assert s.score >= 0 and math.isfinite(s.score)
            assert len(s.per_step_terms) == h
            assert s.score == pytest.approx(sum(s.per_step_terms), abs=1e-10)
            assert s.per_step_terms[0] == pytest.approx(
                ei_formula(m[s.candidate_index], math.sqrt(v[s.candidate_index]), inc), rel=1e-9, abs=1e-12)
        assert sel.index == int(np.argmax(sel.score_array()))

    @pytest.mark.invariant
    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_monotone_in_horizon_for_fixed_rollouts(self, seed, h):
        rng = np.random.default_rng(seed)
        gp = random_gp(rng, 6, 2)
        pts = rng.random((3, 2))
        inc = float(gp.from_standard(gp.train_y).max())
        trajs = rollout_batch(_policy(gp, q=16), pts, h, 3, np.random.SeedSequence(seed))
        m, v = predict_arrays(gp, pts)
        terms = plan_terms(trajs, ei_array(m, v, inc), inc)
        sums = np.cumsum(terms, axis=1)
        assert np.all(np.diff(sums, axis=1) >= 0)

    @pytest.mark.invariant
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
    def test_argmax_invariant_to_affine_rescaling(self, seed, a, b):
        rng = np.random.default_rng(seed)
        gp = random_gp(rng, 6, 2)
        pts = rng.random((6, 2))
        inc = float(gp.from_standard(gp.train_y).max())
        s = evaluate_plan(pts, _policy(gp, q=16), inc, 2, 2, np.random.SeedSequence(seed)).score_array()
        assert int(np.argmax(a * s + b)) == int(np.argmax(s))

    @pytest.mark.invariant
    def test_variance_shrinks_with_more_rollouts(self, rng):
        gp = random_gp(rng, 8, 2)
        pts = rng.random((1, 2))
        inc = float(gp.from_standard(gp.train_y).max())
        policy = _policy(gp, q=16)
        est = {d: [evaluate_plan(pts, policy, inc, 3, d, np.random.SeedSequence([d, r])).scores[0].score
                   for r in range(100)] for d in (4, 64)}
        assert np.var(est[64], ddof=1) < np.var(est[4], ddof=1)

    def test_rejects_bad_sizes(self, rng):
        gp = random_gp(rng, 4, 1)
        with pytest.raises(ValueError):
            evaluate_plan(np.array([[0.5]]), _policy(gp), 0.0, 0, 1, np.random.SeedSequence(0))
        with pytest.raises(ValueError):
            evaluate_plan(np.array([[0.5]]), _policy(gp), 0.0, 2, 0, np.random.SeedSequence(0))
