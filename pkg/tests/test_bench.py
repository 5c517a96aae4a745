import math

import numpy as np
import pytest

from jules.bench import (DetectionMetrics, PeakExperimentSpec,
                         _score_idealization, hmm_three_state,
                         run_isolated_peak, run_null_rate, run_separation)


class TestScoring:
    def test_perfect_match(self):
        truth = np.array([0.2, 0.2005])
        times = np.array([0.2001, 0.2006])
        detected, j, fp, _ = _score_idealization(times, truth, 11e-4)
        assert detected and j == 0 and fp == 0

    def test_near_miss_not_counted_either_way(self):
        truth = np.array([0.2, 0.2005])
        times = np.array([0.2002])  # one boundary change only
        detected, _, fp, hits = _score_idealization(times, truth, 11e-4)
        assert not detected
        assert fp == 0
        assert hits == 1

    def test_false_positive_counted(self):
        truth = np.array([0.2, 0.2005])
        times = np.array([0.05, 0.2001, 0.2006])
        detected, j, fp, _ = _score_idealization(times, truth, 11e-4)
        assert detected and j == 1 and fp == 1

    def test_non_consecutive_is_no_detection(self):
        truth = np.array([0.2, 0.2005])
        times = np.array([0.2001, 0.25, 0.2506])
        detected, _, fp, _ = _score_idealization(times, truth, 11e-4)
        assert not detected
        assert fp == 2


class TestHmmSpecBuilder:
    def test_three_state_geometry(self):
        spec = hmm_three_state(3.0)
        assert np.array_equal(spec.levels, [40.0, 20.0, 23.0])
        assert np.array_equal(spec.exit_rates, [2.5, 800.0, 800.0])
        assert spec.transition_probs[0, 1] == 0.5
        assert spec.transition_probs[1, 0] == 1.0


class TestExperimentPlumbing:
    def test_isolated_peak_row_shape(self, ga_filter):
        spec = PeakExperimentSpec(lengths=(5,), reps=4, seed=1)
        rows = run_isolated_peak(spec, ga_filter, q=1.4539)
        assert len(rows) == 1
        row = rows[0]
        assert isinstance(row, DetectionMetrics)
        assert row.reps == 4
        assert 0 <= row.detected_pct <= 100
        assert row.detected_pct >= row.correctly_identified_pct
        if not math.isnan(row.mse_level_trimmed):
            assert row.mse_level_trimmed <= row.mse_level + 1e-12

    def test_reproducible(self, ga_filter):
        spec = PeakExperimentSpec(lengths=(3,), reps=6, seed=9)
        a = run_isolated_peak(spec, ga_filter, q=1.4539)
        b = run_isolated_peak(spec, ga_filter, q=1.4539)
        assert a == b

    def test_separation_row_shape(self, ga_filter):
        rows = run_separation([34], reps=4, seed=2, filt=ga_filter, q=1.4539)
        row = rows[0]
        total = (row["freq_no_detection_separation"]
                 + row["freq_no_deconvolution_separation"]
                 + row["freq_perfect_separation"])
        assert total == pytest.approx(1.0)

    def test_null_rate_zero_for_huge_q(self, ga_filter):
        rate = run_null_rate(512, reps=5, seed=3, filt=ga_filter, q=50.0)
        assert rate == 0.0
