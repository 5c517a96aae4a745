"""Piecewise-constant signals, sampled traces, and exact convolution.

Change times are real-valued throughout; the deconvolution step places
changes between samples, so nothing here is grid-bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filters import TruncatedFilter

__all__ = ["StepSignal", "Trace", "convolve"]


@dataclass(frozen=True)
class StepSignal:
    """A step function: levels[0] before change_times[0], levels[j] on
    [change_times[j-1], change_times[j]), right continuous.

    The signal is taken constant at levels[0] for all t < 0 as well, so a
    convolution shortly after time zero is well defined.
    """

    change_times: np.ndarray
    levels: np.ndarray
    end_time: float

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.change_times, dtype=float))
        levels = np.atleast_1d(np.asarray(self.levels, dtype=float))
        if times.size == 0:
            times = times.reshape(0)
        object.__setattr__(self, "change_times", times)
        object.__setattr__(self, "levels", levels)
        if levels.size != times.size + 1:
            raise ValueError("need exactly one more level than change times")
        if not np.all(np.isfinite(levels)):
            raise ValueError("levels must be finite")
        if times.size:
            if np.any(np.diff(times) <= 0):
                raise ValueError("change times must be strictly increasing")
            if times[0] <= 0 or times[-1] >= self.end_time:
                raise ValueError("change times must lie inside (0, end_time)")
            if np.any(np.diff(levels) == 0):
                raise ValueError("consecutive levels must differ")

    @property
    def change_count(self) -> int:
        return self.change_times.size

    def value_at(self, times) -> np.ndarray:
        """Signal value f(t); right continuous at the changes."""
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.change_times, times, side="right")
        return self.levels[idx]

    def shifted(self, delta: float) -> "StepSignal":
        return StepSignal(self.change_times + delta, self.levels.copy(),
                          self.end_time + delta)

    def segment_starts(self) -> np.ndarray:
        """Start times of all segments, the first one pinned at 0."""
        return np.concatenate(([0.0], self.change_times))


def constant_signal(level: float, end_time: float) -> StepSignal:
    return StepSignal(np.empty(0), np.array([level]), end_time)


@dataclass(frozen=True)
class Trace:
    """Equidistant observations y[k] taken at times (k + 1) / sampling_rate."""

    values: np.ndarray
    sampling_rate: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("trace needs at least one observation")
        if not np.all(np.isfinite(values)):
            raise ValueError("trace values must be finite")
        if self.sampling_rate <= 0:
            raise ValueError("sampling rate must be positive")

    @property
    def n(self) -> int:
        return self.values.size

    def times(self) -> np.ndarray:
        return np.arange(1, self.n + 1) / self.sampling_rate


def convolve(signal: StepSignal, filt: TruncatedFilter, times) -> np.ndarray:
    """Evaluate the filtered signal at arbitrary times, exactly.

    Uses the telescoping form around the step response A:

        (F_m * f)(t) = l_0 + sum_j (l_j - l_{j-1}) A(t - tau_j)

    with A = 0 before the change and A = 1 from m samples after it, so each
    change only contributes inside its own transient window.
    """
    times = np.asarray(times, dtype=float)
    if times.size and (times.min() < 0 or times.max() > signal.end_time):
        raise ValueError("evaluation time outside [0, end_time]")
    scalar = times.ndim == 0
    t = np.atleast_1d(times).ravel()
    order = None
    if t.size > 1 and np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        t = t[order]

    # start from the fully settled step value, then correct the transients
    out = signal.value_at(t)
    window = filt.lag_seconds
    jumps = np.diff(signal.levels)
    for tau, jump in zip(signal.change_times, jumps):
        lo = np.searchsorted(t, tau, side="left")
        hi = np.searchsorted(t, tau + window, side="right")
        if hi > lo:
            ramp = filt.step_response(t[lo:hi] - tau)
            out[lo:hi] += jump * (ramp - (t[lo:hi] >= tau))
    if order is not None:
        undo = np.empty_like(order)
        undo[order] = np.arange(order.size)
        out = out[undo]
    if scalar:
        return float(out[0])
    return out.reshape(np.atleast_1d(times).shape)


def sample_exact(signal: StepSignal, filt: TruncatedFilter, n: int) -> np.ndarray:
    """Noise-free trace values at samples 1..n."""
    t = np.arange(1, n + 1) / filt.sampling_rate
    if signal.end_time < n / filt.sampling_rate:
        raise ValueError("signal too short for the requested sample count")
    return convolve(signal, filt, t)
