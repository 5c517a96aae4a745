"""Analog Bessel lowpass filters and their truncated kernels.

The filter enters the data model twice: its kernel smears every level
change over roughly ``m`` samples, and it colors the noise with an
autocorrelation that we truncate at lag ``m``.  Everything downstream
(simulation, detection, deconvolution) works off the truncated filter
built here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import factorial

__all__ = ["AnalogFilter", "TruncatedFilter", "bessel_filter", "truncate"]

SUPPORTED_POLE_COUNTS = range(2, 11)

#: default relative level at which the autocorrelation is cut off
DEFAULT_TRUNCATION_THRESHOLD = 1e-3

#: refuse truncation lags beyond this unless the caller raises the cap
DEFAULT_MAX_LAG = 200


def _unit_bessel_poles(n: int) -> np.ndarray:
    # roots of the reverse Bessel polynomial; all simple, negative real part
    coeffs = []
    for k in range(n + 1):
        num = factorial(2 * n - k, exact=True)
        den = 2 ** (n - k) * factorial(k, exact=True) * factorial(n - k, exact=True)
        coeffs.append(num // den)
    # coeffs[k] multiplies s^k; numpy wants highest order first
    poly = np.array(coeffs[::-1], dtype=float)
    return np.roots(poly)


def _magnitude_from_poles(poles: np.ndarray, omega: float) -> float:
    # |H(j w)| for H(s) = prod(-p) / prod(s - p); DC gain is 1
    num = np.prod(np.abs(poles))
    den = np.prod(np.abs(1j * omega - poles))
    return float(num / den)


@dataclass(frozen=True)
class AnalogFilter:
    """Pole/residue form of an analog lowpass filter.

    The impulse response is ``h(t) = sum_k residues[k] * exp(poles[k] t)``
    for ``t >= 0``, which keeps the step response and autocorrelation in
    closed form.  DC gain is normalized to one, the magnitude at `cutoff`
    to ``1/sqrt(2)`` (-3 dB convention).
    """

    pole_count: int
    cutoff: float
    sampling_rate: float
    poles: np.ndarray = field(repr=False)
    residues: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.any(self.poles.real >= 0):
            raise ValueError("unstable filter: pole with non-negative real part")

    def impulse_response(self, t) -> np.ndarray:
        """Kernel values h(t); zero for t < 0."""
        t = np.asarray(t, dtype=float)
        out = np.einsum("k,...k->...", self.residues,
                        np.exp(np.multiply.outer(t, self.poles)))
        return np.where(t >= 0, out.real, 0.0)

    def step_response(self, t) -> np.ndarray:
        """Integral of the kernel from 0 to t."""
        t = np.asarray(t, dtype=float)
        coef = self.residues / self.poles
        out = np.einsum("k,...k->...", coef,
                        np.exp(np.multiply.outer(t, self.poles)) - 1.0)
        return np.where(t >= 0, out.real, 0.0)

    def autocorrelation(self, t) -> np.ndarray:
        """(h * h)(t) = integral of h(s) h(s + |t|) ds, in closed form."""
        t = np.abs(np.asarray(t, dtype=float))
        # int_0^inf exp((p_j + p_k) s) ds = -1 / (p_j + p_k)
        pair = -np.outer(self.residues, self.residues) / np.add.outer(
            self.poles, self.poles)
        coef = pair.sum(axis=0)  # collapse j; exp carries p_k
        out = np.einsum("k,...k->...", coef,
                        np.exp(np.multiply.outer(t, self.poles)))
        return out.real

    def magnitude(self, freq_hz: float) -> float:
        """Magnitude response at a physical frequency in Hz (DC gain 1)."""
        return _magnitude_from_poles(self.poles, 2.0 * math.pi * freq_hz)


def bessel_filter(pole_count: int, cutoff: float, sampling_rate: float) -> AnalogFilter:
    """Build an analog Bessel lowpass filter with -3 dB point at `cutoff`.

    Parameters
    ----------
    pole_count : number of poles, 2..10
    cutoff : -3 dB frequency in Hz
    sampling_rate : sampling rate of the digitized trace in Hz

    The poles are the roots of the reverse Bessel polynomial, frequency
    scaled so the magnitude drops to 1/sqrt(2) at `cutoff`; residues come
    from the partial fraction expansion of the all-pole transfer function.
    """
    if pole_count not in SUPPORTED_POLE_COUNTS:
        raise ValueError(f"unsupported pole count {pole_count}; need 2..10")
    if not (0.0 < cutoff < sampling_rate / 2.0):
        raise ValueError("cutoff must lie in (0, sampling_rate / 2)")

    unit_poles = _unit_bessel_poles(pole_count)
    # locate the -3 dB angular frequency of the unit-scale filter
    target = 1.0 / math.sqrt(2.0)
    w3 = brentq(lambda w: _magnitude_from_poles(unit_poles, w) - target,
                1e-9, 10.0 * pole_count, xtol=1e-14, rtol=8.9e-16)
    poles = unit_poles * (2.0 * math.pi * cutoff / w3)

    # residues of prod(-p_j) / prod(s - p_j) at simple poles
    gain = np.prod(-poles)
    residues = np.empty_like(poles)
    for k in range(pole_count):
        others = np.delete(poles, k)
        residues[k] = gain / np.prod(poles[k] - others)

    return AnalogFilter(pole_count=pole_count, cutoff=cutoff,
                        sampling_rate=sampling_rate,
                        poles=poles, residues=residues)


@dataclass(frozen=True)
class TruncatedFilter:
    """Kernel truncated at lag m with the matching truncated autocorrelation.

    `acf` holds the noise-scale-free values (h * h)(j / sampling_rate) for
    j = 0..m, truncated directly rather than recomputed from the truncated
    kernel.  The kernel itself is rescaled to integrate to one, so the step
    response saturates exactly at 1 after m samples.
    """

    m: int
    sampling_rate: float
    acf: np.ndarray = field(repr=False)
    parent: AnalogFilter = field(repr=False)
    threshold: float
    _scale: float = field(repr=False)

    @property
    def lag_seconds(self) -> float:
        return self.m / self.sampling_rate

    @property
    def correlation(self) -> np.ndarray:
        """acf normalized to correlation (lag-0 entry equals 1)."""
        return self.acf / self.acf[0]

    def kernel(self, t) -> np.ndarray:
        """Rescaled truncated kernel; zero outside [0, m / sampling_rate]."""
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t <= self.lag_seconds)
        return np.where(inside, self.parent.impulse_response(t) / self._scale, 0.0)

    def step_response(self, t) -> np.ndarray:
        """Integral of the truncated kernel: 0 before 0, 1 after m samples.

        Bessel step responses ring slightly, so values inside the window may
        exceed 1 before settling; only outside [0, m/fs] is it pinned.
        """
        t = np.asarray(t, dtype=float)
        ramp = self.parent.step_response(np.clip(t, 0.0, self.lag_seconds))
        return ramp / self._scale

    def step_table(self) -> np.ndarray:
        """Step response at integer sample lags 0..m."""
        return self.step_response(np.arange(self.m + 1) / self.sampling_rate)

    def config(self) -> dict:
        parent = self.parent
        return {
            "type": "bessel",
            "poles": parent.pole_count,
            "cutoff_hz": parent.cutoff,
            "sample_hz": parent.sampling_rate,
            "trunc_threshold": self.threshold,
        }


def truncate(filt, threshold: float = DEFAULT_TRUNCATION_THRESHOLD,
             max_lag: int = DEFAULT_MAX_LAG) -> TruncatedFilter:
    """Truncate a filter at the smallest lag from which the normalized
    autocorrelation stays below `threshold`.

    The autocorrelation of a Bessel kernel oscillates while it decays, so
    the rule looks at the envelope (largest |acf| at or beyond each lag),
    not at the first crossing.  For the 4-pole 1 kHz / 10 kHz filter and
    threshold 1e-3 this gives lag 11; the first crossing alone would give 9.

    Accepts an `AnalogFilter` or an already truncated filter (in which case
    the rule is re-applied to the stored autocorrelation).  Raises if no
    lag up to `max_lag` qualifies.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    if isinstance(filt, TruncatedFilter):
        parent, known = filt.parent, filt.acf
    else:
        parent, known = filt, None

    if known is not None:
        acf = known
    else:
        # exponential decay makes a fixed buffer past max_lag conclusive
        lags = np.arange(max_lag + 64) / parent.sampling_rate
        acf = parent.autocorrelation(lags)
    envelope = np.maximum.accumulate(np.abs(acf)[::-1])[::-1]
    below = np.nonzero(envelope / acf[0] < threshold)[0]
    if below.size == 0 or below[0] > max_lag:
        raise ValueError(
            f"autocorrelation stays above {threshold} beyond lag {max_lag}; "
            "raise max_lag or the threshold")
    m = int(below[0])
    scale = float(parent.step_response(m / parent.sampling_rate))
    return TruncatedFilter(m=m, sampling_rate=parent.sampling_rate,
                           acf=acf[: m + 1].copy(), parent=parent,
                           threshold=threshold, _scale=scale)
