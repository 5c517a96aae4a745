"""Event-level statistics on idealizations.

Closing events (segments dipping below both neighbors) are pulled out of an
idealization, classified by dwell time and amplitude, and their rates fitted
with a window-truncated exponential likelihood.  A rate fitted from distances
between detected events underestimates the truth because undetectably short
events merge neighboring gaps; dividing by the detection probability undoes
that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .deconv import Idealization

__all__ = [
    "Event", "EventTable", "EventThresholds", "extract_events",
    "fit_truncated_exponential", "truncation_probability",
    "missed_event_correction", "density_export",
]


@dataclass(frozen=True)
class EventThresholds:
    """Classification windows, in seconds / conductance units."""

    flicker_max: float = 2.6e-3
    dwell_min: float = 0.24e-3
    slow_min: float = 10e-3
    amp_band: tuple = (10.0, 30.0)


@dataclass(frozen=True)
class Event:
    start: float
    dwell: float
    amplitude: float
    label: str


@dataclass(frozen=True)
class EventTable:
    events: tuple

    def __len__(self):
        return len(self.events)

    def of_class(self, label: str) -> list:
        return [e for e in self.events if e.label == label]

    def dwells(self, label: str = "flicker") -> np.ndarray:
        return np.array([e.dwell for e in self.of_class(label)])

    def amplitudes(self, label: str = "flicker") -> np.ndarray:
        return np.array([e.amplitude for e in self.of_class(label)])

    def flicker_distances(self) -> np.ndarray:
        """Gaps between consecutive flicker events (end of one to start of
        the next); matches the open dwell when other events are spurious."""
        return self._gaps(self.of_class("flicker"))

    def closing_gaps(self, min_amplitude: float = 10.0) -> np.ndarray:
        """Open dwells between consecutive closing events of any duration
        class, keeping only events with at least `min_amplitude` (smaller
        dips are treated as baseline artifacts, not gating)."""
        return self._gaps([e for e in self.events if e.amplitude >= min_amplitude])

    @staticmethod
    def _gaps(events) -> np.ndarray:
        if len(events) < 2:
            return np.empty(0)
        starts = np.array([e.start for e in events])
        ends = starts + np.array([e.dwell for e in events])
        return starts[1:] - ends[:-1]


def extract_events(ideal, thresholds: EventThresholds = EventThresholds()) -> EventTable:
    """Closing events of an idealization.

    A segment is an event when its level lies below both flanking levels;
    the amplitude is measured against the preceding level.  Classification:
    flicker events have dwell in [dwell_min, flicker_max] and amplitude in
    the configured band, slow events have dwell above slow_min, everything
    else is excluded.
    """
    signal = ideal.signal if isinstance(ideal, Idealization) else ideal
    if signal.levels.size < 1:
        raise ValueError("idealization has no segments")
    events = []
    times = np.concatenate((signal.segment_starts(), [signal.end_time]))
    levels = signal.levels
    for i in range(1, levels.size - 1):
        if not (levels[i] < levels[i - 1] and levels[i] < levels[i + 1]):
            continue
        dwell = times[i + 1] - times[i]
        amplitude = levels[i - 1] - levels[i]
        if (thresholds.dwell_min <= dwell <= thresholds.flicker_max
                and thresholds.amp_band[0] <= amplitude <= thresholds.amp_band[1]):
            label = "flicker"
        elif dwell > thresholds.slow_min:
            label = "slow"
        else:
            label = "excluded"
        events.append(Event(start=float(times[i]), dwell=float(dwell),
                            amplitude=float(amplitude), label=label))
    return EventTable(tuple(events))


def _truncated_score(rate: float, mean: float, a: float, b: float) -> float:
    """Derivative of the per-observation truncated-exponential log likelihood.

    Finite at rate -> 0 (uniform limit), where it equals (a + b)/2 - mean.
    Written with the exponential of the window width only, so large |rate|
    brackets cannot overflow.
    """
    if rate == 0.0:
        return (a + b) / 2.0 - mean
    if math.isinf(b):
        return 1.0 / rate - mean + a
    width = b - a
    if rate > 0:
        d = math.exp(-min(rate * width, 745.0))
        term = (a - b * d) / (1.0 - d)
    else:
        d = math.exp(max(rate * width, -745.0))
        term = (a * d - b) / (d - 1.0)
    return 1.0 / rate - mean + term


def fit_truncated_exponential(samples, window) -> float:
    """Rate of an exponential observed only inside [a, b], by maximum
    likelihood.

    The score is strictly decreasing in the rate, so a bracketed root search
    suffices; brackets are expanded geometrically until they straddle the
    root.  For b = inf this reduces to 1 / (mean - a).
    """
    samples = np.asarray(samples, dtype=float)
    a, b = float(window[0]), float(window[1])
    if samples.size < 2:
        raise ValueError("need at least two samples")
    if np.any(samples < a) or np.any(samples > b):
        raise ValueError("samples outside the truncation window")
    mean = float(samples.mean())
    if math.isinf(b):
        return 1.0 / (mean - a)

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if _truncated_score(lo, mean, a, b) > 0:
            break
        lo *= 2.0
    for _ in range(200):
        if _truncated_score(hi, mean, a, b) < 0:
            break
        hi *= 2.0
    return float(brentq(lambda r: _truncated_score(r, mean, a, b), lo, hi,
                        rtol=1e-10, maxiter=200))


def truncation_probability(rate: float, window) -> float:
    """P(dwell in [a, b]) under an exponential with the given rate."""
    a, b = float(window[0]), float(window[1])
    if math.isinf(b):
        return math.exp(-rate * a)
    return math.exp(-rate * a) - math.exp(-rate * b)


def missed_event_correction(rate: float, window) -> float:
    """Divide a fitted rate by the probability that an event falls in the
    detection window, undoing the thinning by undetectable events."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    return rate / truncation_probability(rate, window)


def density_export(values, bandwidth: float = 1.0, kind: str = "histogram",
                   grid_size: int = 512, limits=None, bins: int = 50) -> dict:
    """Histogram counts or a Gaussian kernel density on a uniform grid.

    Returns a dict of columns ready for CSV export; the density column
    integrates to one over the grid in both cases.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 1:
        raise ValueError("need at least one value")
    if kind == "histogram":
        if limits is None:
            limits = (values.min(), values.max())
        if limits[0] == limits[1]:
            limits = (limits[0] - 0.5, limits[1] + 0.5)
        counts, edges = np.histogram(values, bins=bins, range=limits)
        width = edges[1] - edges[0]
        total = counts.sum()
        density = counts / (total * width) if total else counts.astype(float)
        return {"x": 0.5 * (edges[:-1] + edges[1:]),
                "count": counts.astype(float), "density": density}
    if kind == "gaussian_kde":
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive for a KDE")
        if limits is None:
            limits = (values.min() - 4 * bandwidth, values.max() + 4 * bandwidth)
        x = np.linspace(limits[0], limits[1], grid_size)
        z = (x[:, None] - values[None, :]) / bandwidth
        density = np.exp(-0.5 * z * z).sum(axis=1)
        density /= values.size * bandwidth * math.sqrt(2.0 * math.pi)
        return {"x": x, "density": density}
    raise ValueError(f"unknown density kind {kind!r}")
