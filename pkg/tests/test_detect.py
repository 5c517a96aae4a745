import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jules import _dp
from jules.detect import (DetectionConfig, NoFeasibleSegmentation,
                          dyadic_lengths, estimate_sigma, fit_segmentation,
                          make_context, multiscale_quantile,
                          multiscale_statistic, penalty, postfilter, sum_sd)
from jules.noise import NoiseModel, derived_seed, simulate_trace
from jules.signal import StepSignal, Trace, constant_signal

FS = 10000.0


def make_trace(values):
    return Trace(np.asarray(values, dtype=float), FS)


class TestPenalty:
    def test_full_length(self):
        assert penalty(4000, 4000) == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_length_n_over_e(self):
        n = 100000
        length = int(round(n / math.e))
        assert penalty(length, n) == pytest.approx(2.0, abs=1e-3)

    def test_strictly_decreasing(self):
        n = 4096
        vals = [penalty(2 ** k, n) for k in range(13)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_domain(self):
        with pytest.raises(ValueError):
            penalty(0, 10)
        with pytest.raises(ValueError):
            penalty(11, 10)


class TestEstimateSigma:
    def test_noiseless_constant(self, ga_filter):
        tr = make_trace(np.full(1000, 40.0))
        assert estimate_sigma(tr, ga_filter) == 0.0

    def test_recovers_sigma(self, ga_filter):
        sig = constant_signal(40.0, 11.0)
        tr = simulate_trace(sig, ga_filter, NoiseModel(sigma0=1.4), 10 ** 5, 21)
        assert estimate_sigma(tr, ga_filter) == pytest.approx(1.4, rel=0.02)

    def test_robust_to_single_jump(self, ga_filter):
        sig = StepSignal([5.0], [40.0, 20.0], 11.0)
        tr = simulate_trace(sig, ga_filter, NoiseModel(sigma0=1.4), 10 ** 5, 22)
        assert estimate_sigma(tr, ga_filter) == pytest.approx(1.4, rel=0.02)


def brute_force_statistic(y, candidate_values, rho, sigma, n_pen=None):
    """Direct evaluation over every dyadic window inside constant stretches."""
    n = y.size
    if n_pen is None:
        n_pen = n
    best = -math.inf
    for L in dyadic_lengths(n):
        L = int(L)
        sd = sum_sd(L, rho, sigma)[0]
        pen = penalty(L, n_pen)
        for u in range(0, n - L + 1):
            block = candidate_values[u: u + L]
            if np.any(block != block[0]):
                continue
            s = abs(np.sum(y[u: u + L]) - L * block[0])
            val = (s / sd if sd > 0 else (0.0 if s == 0 else math.inf)) - pen
            best = max(best, val)
    return best


class TestMultiscaleStatistic:
    def test_zero_noise_truth_candidate(self, ga_filter):
        # all residual sums vanish, so the maximum is the negated penalty of
        # the largest admissible dyadic window
        tr = make_trace(np.full(512, 7.5))
        ctx = make_context(tr, ga_filter, sigma=0.0)
        cand = constant_signal(7.5, 200.0)
        stat = multiscale_statistic(tr, cand, ctx)
        assert stat == pytest.approx(-penalty(512, 512), abs=1e-12)

    def test_matches_brute_force_n8(self, ga_filter):
        rng = np.random.default_rng(5)
        y = rng.normal(size=8)
        tr = make_trace(y)
        ctx = make_context(tr, ga_filter, sigma=1.3)
        cand = constant_signal(0.25, 1.0)
        stat = multiscale_statistic(tr, cand, ctx)
        brute = brute_force_statistic(y, np.full(8, 0.25),
                                      ga_filter.correlation, 1.3)
        assert stat == pytest.approx(brute, abs=1e-12)

    def test_matches_brute_force_step_candidate(self, ga_filter):
        rng = np.random.default_rng(6)
        y = rng.normal(size=64)
        tr = make_trace(y)
        ctx = make_context(tr, ga_filter, sigma=0.9)
        cand = StepSignal([17 / FS, 40 / FS], [0.0, 1.5, -0.5],
                          (tr.n + 1) / FS)
        values = np.zeros(64)
        values[16:39] = 1.5  # first new 0-based index is fs*tau - 1
        values[39:] = -0.5
        stat = multiscale_statistic(tr, cand, ctx)
        brute = brute_force_statistic(y, values, ga_filter.correlation, 0.9)
        assert stat == pytest.approx(brute, abs=1e-12)

    def test_grid_alignment_required(self, ga_filter):
        tr = make_trace(np.zeros(100))
        ctx = make_context(tr, ga_filter, sigma=1.0)
        cand = StepSignal([0.00037], [0.0, 1.0], 1.0)
        with pytest.raises(ValueError):
            multiscale_statistic(tr, cand, ctx)


class TestMultiscaleQuantile:
    def test_deterministic(self, ga_filter, tmp_path):
        q1 = multiscale_quantile(256, ga_filter, 0.05, reps=300, seed=7,
                                 cache_dir=tmp_path)
        q2 = multiscale_quantile(256, ga_filter, 0.05, reps=300, seed=7,
                                 cache_dir=tmp_path, use_cache=False)
        assert q1 == q2

    def test_cache_hit(self, ga_filter, tmp_path):
        q1 = multiscale_quantile(128, ga_filter, 0.1, reps=200, seed=3,
                                 cache_dir=tmp_path)
        files = list(tmp_path.glob("quantile-*.json"))
        assert len(files) == 1
        q2 = multiscale_quantile(128, ga_filter, 0.1, reps=200, seed=3,
                                 cache_dir=tmp_path)
        assert q1 == q2

    def test_monotone_in_alpha(self, ga_filter, tmp_path):
        qs = [multiscale_quantile(256, ga_filter, a, reps=400, seed=11,
                                  cache_dir=tmp_path)
              for a in (0.01, 0.05, 0.1)]
        assert qs[0] >= qs[1] >= qs[2]

    def test_calibration_consistency(self, ga_filter, tmp_path):
        # fraction of null statistics above q(alpha) is alpha by construction
        n, alpha, reps = 256, 0.05, 4000
        q = multiscale_quantile(n, ga_filter, alpha, reps=reps, seed=13,
                                cache_dir=tmp_path)
        sig = constant_signal(0.0, (n + 64) / FS)
        ctx_cache = {}
        exceed = 0
        fresh = 1500
        for r in range(fresh):
            tr = simulate_trace(sig, ga_filter, NoiseModel(sigma0=1.0), n,
                                derived_seed(999, r))
            ctx = make_context(tr, ga_filter, sigma=1.0)
            stat = multiscale_statistic(tr, constant_signal(0.0, 1.0), ctx)
            exceed += stat > q
        rate = exceed / fresh
        assert abs(rate - alpha) <= 3 * math.sqrt(alpha * (1 - alpha) / fresh)


def random_instance(rng, n_max=512, k_max=4):
    n = int(rng.integers(16, n_max + 1))
    k = int(rng.integers(0, min(k_max, n // 4) + 1))
    bounds = np.sort(rng.choice(np.arange(1, n), size=k, replace=False))
    levels = np.cumsum(np.concatenate(([0.0], rng.normal(0, 4, k))))
    values = np.zeros(n)
    prev = 0
    for b, lv in zip(np.append(bounds, n), levels):
        values[prev: int(b)] = lv
        prev = int(b)
    sigma = float(rng.uniform(0.5, 2.0))
    y = values + sigma * rng.normal(size=n)
    q = float(rng.uniform(0.8, 2.5))
    return y, sigma, q


def run_dp(y, rho, sigma, q, pruned=True, max_changes=None):
    n = y.size
    lengths = dyadic_lengths(n)
    sd = sum_sd(lengths, rho, sigma)
    pens = np.array([penalty(int(L), n) for L in lengths])
    halfw = sd * (q + pens) / lengths
    P = np.concatenate(([0.0], np.cumsum(y)))
    Q = np.concatenate(([0.0], np.cumsum(y * y)))
    fn = _dp.dp_segment if pruned else _dp.dp_segment_reference
    cap = max_changes + 1 if max_changes is not None else n
    return fn(P, Q, lengths, halfw, cap)


class TestFitSegmentation:
    def test_noiseless_constant(self, ga_filter):
        tr = make_trace(np.full(600, 17.25))
        ctx = make_context(tr, ga_filter, sigma=0.0)
        seg = fit_segmentation(tr, ctx, q=1.5)
        assert seg.change_count == 0
        assert seg.levels[0] == 17.25

    def test_pruned_equals_unpruned(self, ga_filter):
        rng = np.random.default_rng(2024)
        rho = ga_filter.correlation
        for _ in range(200):
            y, sigma, q = random_instance(rng)
            s1, b1, v1 = run_dp(y, rho, sigma, q, pruned=True)
            s2, b2, v2 = run_dp(y, rho, sigma, q, pruned=False)
            assert s1 == s2 == 0
            assert np.array_equal(b1, b2)
            assert np.array_equal(v1, v2)

    def test_matches_exhaustive_search(self, ga_filter):
        rng = np.random.default_rng(77)
        rho = ga_filter.correlation
        for _ in range(30):
            n = int(rng.integers(16, 65))
            k = int(rng.integers(0, 3))
            bounds = np.sort(rng.choice(np.arange(4, n - 3), size=k,
                                        replace=False))
            values = np.zeros(n)
            prev, level = 0, 0.0
            for b in np.append(bounds, n):
                values[prev: int(b)] = level
                prev = int(b)
                level += 12.0
            y = values + rng.normal(size=n)
            lengths = dyadic_lengths(n)
            sd = sum_sd(lengths, rho, 1.0)
            pens = np.array([penalty(int(L), n) for L in lengths])
            halfw = sd * (2.0 + pens) / lengths
            P = np.concatenate(([0.0], np.cumsum(y)))
            Q = np.concatenate(([0.0], np.cumsum(y * y)))
            s1, b1, v1 = _dp.dp_segment(P, Q, lengths, halfw, n)
            s2, b2, v2 = _dp.exhaustive_segment(P, Q, lengths, halfw, 3)
            assert s1 == 0 and s2 == 0
            assert np.array_equal(b1, b2)
            assert np.array_equal(v1, v2)

    def test_output_satisfies_constraint(self, ga_filter):
        sig = StepSignal([0.2, 0.2005], [40.0, 20.0, 40.0], 1.0)
        for r in range(10):
            tr = simulate_trace(sig, ga_filter, NoiseModel(sigma0=1.4), 4000,
                                derived_seed(31, r))
            ctx = make_context(tr, ga_filter)
            q = 1.4539
            seg = fit_segmentation(tr, ctx, q)
            assert multiscale_statistic(tr, seg, ctx) <= q + 1e-9

    def test_minimality_against_exhaustive(self, ga_filter):
        # no segmentation with fewer changes can satisfy the constraint
        rng = np.random.default_rng(99)
        rho = ga_filter.correlation
        for _ in range(10):
            n = 48
            y = np.where(np.arange(n) < 31, 0.0, 14.0) + rng.normal(size=n)
            lengths = dyadic_lengths(n)
            sd = sum_sd(lengths, rho, 1.0)
            pens = np.array([penalty(int(L), n) for L in lengths])
            halfw = sd * (1.5 + pens) / lengths
            P = np.concatenate(([0.0], np.cumsum(y)))
            Q = np.concatenate(([0.0], np.cumsum(y * y)))
            _, b1, _ = _dp.dp_segment(P, Q, lengths, halfw, n)
            k = b1.size
            if k == 0:
                continue
            status, _, _ = _dp.exhaustive_segment(P, Q, lengths, halfw, k - 1)
            assert status == 1  # one fewer change is infeasible

    def test_infeasible_cap_raises(self, ga_filter):
        sig = StepSignal([0.02], [0.0, 30.0], 1.0)
        tr = simulate_trace(sig, ga_filter, NoiseModel(sigma0=1.0), 400, 3)
        ctx = make_context(tr, ga_filter, sigma=1.0)
        with pytest.raises(NoFeasibleSegmentation):
            fit_segmentation(tr, ctx, q=1.5, max_changes=0)

    def test_q_must_be_finite(self, ga_filter):
        tr = make_trace(np.zeros(100))
        ctx = make_context(tr, ga_filter, sigma=1.0)
        with pytest.raises(ValueError):
            fit_segmentation(tr, ctx, q=math.inf)


class TestDetectionConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            DetectionConfig(alpha=1.5)
        with pytest.raises(ValueError):
            DetectionConfig(mc_reps=10)
        with pytest.raises(ValueError):
            DetectionConfig(interval_system="full")
        cfg = DetectionConfig(q=1.3, alpha=2.0)  # q supersedes alpha checks
        assert cfg.q == 1.3


class TestPostfilter:
    def test_untouched_when_far_apart(self, ga_filter):
        seg = StepSignal([0.05, 0.1], [40.0, 30.0, 20.0], 1.0)
        out = postfilter(seg, ga_filter)
        assert np.array_equal(out.change_times, seg.change_times)
        assert np.array_equal(out.levels, seg.levels)

    def test_staircase_merges(self, ga_filter):
        seg = StepSignal([100 / FS, 105 / FS], [40.0, 30.0, 20.0], 1.0)
        out = postfilter(seg, ga_filter)
        assert out.change_times == pytest.approx([100 / FS])
        assert np.array_equal(out.levels, [40.0, 20.0])

    def test_direction_change_not_merged(self, ga_filter):
        seg = StepSignal([100 / FS, 105 / FS], [40.0, 30.0, 45.0], 1.0)
        out = postfilter(seg, ga_filter)
        assert np.array_equal(out.change_times, seg.change_times)
        assert np.array_equal(out.levels, seg.levels)

    def test_anchor_window(self, ga_filter):
        # three same-direction steps; the third starts exactly m samples
        # after the first and must stay separate
        m = ga_filter.m
        seg = StepSignal([100 / FS, 105 / FS, (100 + m) / FS],
                         [40.0, 35.0, 30.0, 20.0], 1.0)
        out = postfilter(seg, ga_filter)
        assert out.change_times == pytest.approx([100 / FS, (100 + m) / FS])
        assert np.array_equal(out.levels, [40.0, 30.0, 20.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_idempotent(self, ga_filter, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 8))
        times = np.sort(rng.integers(1, 400, size=k)) / FS
        times = np.unique(times)
        levels = [0.0]
        for _ in range(times.size):
            step = rng.choice([-1, 1]) * rng.uniform(0.5, 10)
            levels.append(levels[-1] + step)
        seg = StepSignal(times, levels, 1.0)
        once = postfilter(seg, ga_filter)
        twice = postfilter(once, ga_filter)
        assert np.array_equal(once.change_times, twice.change_times)
        assert np.array_equal(once.levels, twice.levels)
