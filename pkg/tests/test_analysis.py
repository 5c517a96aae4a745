import math

import numpy as np
import pytest
from scipy.integrate import quad

from jules.analysis import (EventThresholds, density_export, extract_events,
                            fit_truncated_exponential,
                            missed_event_correction, truncation_probability)
from jules.signal import StepSignal

FS = 10000.0


def peak_signal(dwell_s, depth=20.0, start=0.1, end=1.0):
    return StepSignal([start, start + dwell_s], [40.0, 40.0 - depth, 40.0],
                      end)


class TestExtractEvents:
    def test_single_flicker(self):
        table = extract_events(peak_signal(0.5e-3))
        assert len(table) == 1
        e = table.events[0]
        assert e.label == "flicker"
        assert e.amplitude == pytest.approx(20.0)
        assert e.dwell == pytest.approx(0.5e-3)
        assert e.start == pytest.approx(0.1)

    def test_too_short_excluded(self):
        table = extract_events(peak_signal(0.1e-3))
        assert table.events[0].label == "excluded"

    def test_long_dwell_slow(self):
        table = extract_events(peak_signal(15e-3))
        assert table.events[0].label == "slow"

    def test_between_windows_excluded(self):
        table = extract_events(peak_signal(5e-3))
        assert table.events[0].label == "excluded"

    def test_amplitude_band(self):
        table = extract_events(peak_signal(0.5e-3, depth=5.0))
        assert table.events[0].label == "excluded"
        table = extract_events(peak_signal(0.5e-3, depth=35.0))
        assert table.events[0].label == "excluded"

    def test_upward_blips_ignored(self):
        sig = StepSignal([0.1, 0.1005], [40.0, 60.0, 40.0], 1.0)
        assert len(extract_events(sig)) == 0

    def test_requires_flanking(self):
        sig = StepSignal([0.5], [40.0, 20.0], 1.0)
        assert len(extract_events(sig)) == 0

    def test_append_constant_invariance(self):
        base = peak_signal(0.5e-3, end=0.5)
        extended = StepSignal(np.append(base.change_times, 0.9),
                              np.append(base.levels, 55.0), 2.0)
        t1 = extract_events(base)
        t2 = extract_events(extended)
        assert [e.start for e in t1.events] == [e.start for e in t2.events[:1]]

    def test_distances(self):
        # middle closing dwells 5 ms: detected, but not a flicker
        sig = StepSignal([0.1, 0.101, 0.3, 0.305, 0.8, 0.8009],
                         [40.0, 20.0, 40.0, 22.0, 40.0, 21.0, 40.0], 1.0)
        table = extract_events(sig)
        assert [e.label for e in table.events] == ["flicker", "excluded",
                                                   "flicker"]
        # flicker gaps skip the excluded event entirely
        assert table.flicker_distances() == pytest.approx([0.8 - 0.101])
        # gaps between all detected closings split at it
        assert table.closing_gaps(10.0) == pytest.approx(
            [0.3 - 0.101, 0.8 - 0.305])
        # raising the amplitude floor above the middle amplitude drops it
        assert table.closing_gaps(18.5) == pytest.approx([0.8 - 0.101])


class TestTruncatedExponential:
    def test_untruncated_is_inverse_mean(self):
        rng = np.random.default_rng(1)
        x = rng.exponential(0.5, 4000)
        rate = fit_truncated_exponential(x, (0.0, math.inf))
        assert rate == pytest.approx(1.0 / x.mean(), rel=1e-12)

    def test_recovers_rate_in_window(self):
        rng = np.random.default_rng(2)
        window = (0.24, 2.6)  # in ms, rate 0.8/ms
        x = rng.exponential(1 / 0.8, 500000)
        x = x[(x >= window[0]) & (x <= window[1])][:100000]
        rate = fit_truncated_exponential(x, window)
        assert rate == pytest.approx(0.8, rel=0.02)

    def test_score_zero_and_concave_at_optimum(self):
        rng = np.random.default_rng(3)
        window = (0.1, 2.0)
        x = rng.exponential(1.0, 40000)
        x = x[(x >= window[0]) & (x <= window[1])][:5000]
        rate = fit_truncated_exponential(x, window)

        def loglik(lam):
            norm = math.exp(-lam * window[0]) - math.exp(-lam * window[1])
            return np.sum(np.log(lam) - lam * x - np.log(norm))

        h = 1e-6
        score = (loglik(rate + h) - loglik(rate - h)) / (2 * h)
        assert abs(score) / x.size < 1e-4
        curv = (loglik(rate + h) - 2 * loglik(rate) + loglik(rate - h)) / h ** 2
        assert curv < 0

    def test_uniform_like_sample(self):
        # sample mean near the window midpoint: bracket expansion handles
        # the near-zero-rate regime
        x = np.array([0.4, 0.6, 0.5, 0.45, 0.55])
        rate = fit_truncated_exponential(x, (0.0, 1.0))
        assert abs(rate) < 2.0

    def test_validation(self):
        with pytest.raises(ValueError):
            fit_truncated_exponential([0.5], (0.0, 1.0))
        with pytest.raises(ValueError):
            fit_truncated_exponential([0.5, 1.5], (0.0, 1.0))


class TestMissedEventCorrection:
    def test_full_window_identity(self):
        assert missed_event_correction(2.0, (0.0, math.inf)) == 2.0

    def test_formula_against_quadrature(self):
        lam, window = 2.5, (0.032, 1.0)
        prob = quad(lambda t: lam * math.exp(-lam * t), window[0], window[1])[0]
        corrected = missed_event_correction(lam, window)
        assert corrected == pytest.approx(lam / prob, rel=1e-12)
        assert truncation_probability(lam, window) == pytest.approx(prob,
                                                                    rel=1e-10)
        expected = 2.5 / (math.exp(-2.5 * 0.032) - math.exp(-2.5))
        assert corrected == pytest.approx(expected, abs=1e-12)

    def test_correction_never_shrinks(self):
        for lam in (0.3, 1.0, 5.0):
            for window in ((0.0, 1.0), (0.1, 2.0), (0.5, math.inf)):
                assert missed_event_correction(lam, window) >= lam

    def test_requires_positive_rate(self):
        with pytest.raises(ValueError):
            missed_event_correction(0.0, (0.0, 1.0))


class TestDensityExport:
    def test_single_value_histogram(self):
        curve = density_export([3.0], kind="histogram", bins=1)
        assert curve["count"].sum() == 1
        assert curve["count"][0] == 1

    def test_kde_integrates_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=100000)
        curve = density_export(x, bandwidth=0.3, kind="gaussian_kde",
                               limits=(-6, 6), grid_size=2001)
        area = np.trapezoid(curve["density"], curve["x"])
        assert area == pytest.approx(1.0, abs=1e-3)

    def test_histogram_density_normalized(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=5000)
        curve = density_export(x, kind="histogram", bins=40)
        width = curve["x"][1] - curve["x"][0]
        assert curve["density"].sum() * width == pytest.approx(1.0, rel=1e-6)

    def test_kde_separates_two_modes(self):
        rng = np.random.default_rng(6)
        x = np.concatenate((rng.normal(16.0, 0.7, 4000),
                            rng.normal(20.0, 0.7, 4000)))
        curve = density_export(x, bandwidth=0.5, kind="gaussian_kde",
                               limits=(10, 30), grid_size=801)
        dens = curve["density"]
        peaks = [i for i in range(1, dens.size - 1)
                 if dens[i] >= dens[i - 1] and dens[i] >= dens[i + 1]
                 and dens[i] > 0.25 * dens.max()]
        locs = curve["x"][peaks]
        assert locs.size == 2
        assert abs(locs[1] - locs[0]) == pytest.approx(4.0, abs=0.5)

    def test_validation(self):
        with pytest.raises(ValueError):
            density_export([], kind="histogram")
        with pytest.raises(ValueError):
            density_export([1.0], kind="gaussian_kde", bandwidth=0.0)
        with pytest.raises(ValueError):
            density_export([1.0], kind="nope")


def test_event_thresholds_defaults():
    thr = EventThresholds()
    assert thr.flicker_max == pytest.approx(2.6e-3)
    assert thr.dwell_min == pytest.approx(0.24e-3)
    assert thr.slow_min == pytest.approx(10e-3)
    assert thr.amp_band == (10.0, 30.0)
