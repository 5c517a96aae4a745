"""Trace synthesis: exact filtered noise, robustness variants, HMM gating.

The main generator draws the m-dependent Gaussian noise through its exact
moving-average representation, so simulated traces have the same covariance
the detection statistic assumes.  The robustness variants (violet, pink,
heterogeneous) follow the discrete-convolution recipes used for the
robustness study.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filters import TruncatedFilter
from .signal import StepSignal, Trace, sample_exact

__all__ = [
    "NoiseModel", "HmmSpec", "ma_coefficients", "simulate_trace",
    "simulate_hmm", "derived_seed",
]

NOISE_KINDS = ("filtered_white", "violet_mix", "pink_mix", "heterogeneous")

#: moving-average coefficients of the violet (f^2) noise component
VIOLET_COEFFS = (0.8, -0.6)

PINK_OCTAVES = 16


def derived_seed(seed: int, index: int) -> int:
    """Per-replicate seed: base seed XORed with the replicate index."""
    return int(seed) ^ int(index)


@dataclass(frozen=True)
class NoiseModel:
    """Noise specification for `simulate_trace`.

    sigma0 is the marginal standard deviation of each observation.  For the
    mixed kinds, `mix_fraction` of the variance comes from the secondary
    component (violet or pink), the rest from filtered white noise.  The
    heterogeneous kind switches between sigma0 (baseline) and event_sigma
    (inside events) at `oversampling` times the sampling rate before
    filtering and decimating.
    """

    kind: str = "filtered_white"
    sigma0: float = 1.0
    mix_fraction: float = 0.5
    event_sigma: float = 0.0
    oversampling: int = 100

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")
        if not (0.0 <= self.mix_fraction <= 1.0):
            raise ValueError("mix_fraction must lie in [0, 1]")
        if self.oversampling < 1:
            raise ValueError("oversampling must be at least 1")


@dataclass(frozen=True)
class HmmSpec:
    """Continuous-time Markov gating model.

    levels: conductance per state; exit_rates: 1/s per state;
    transition_probs: row-stochastic matrix with zero diagonal giving the
    embedded jump chain.
    """

    levels: np.ndarray
    exit_rates: np.ndarray
    transition_probs: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        rates = np.asarray(self.exit_rates, dtype=float)
        probs = np.asarray(self.transition_probs, dtype=float)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "exit_rates", rates)
        object.__setattr__(self, "transition_probs", probs)
        k = levels.size
        if rates.size != k or probs.shape != (k, k):
            raise ValueError("inconsistent state counts")
        if np.any(rates <= 0):
            raise ValueError("exit rates must be positive")
        if np.any(np.diag(probs) != 0):
            raise ValueError("transition matrix must have zero diagonal")
        if k > 1 and not np.allclose(probs.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to one")


def ma_coefficients(acf: np.ndarray, min_iterations: int | None = None,
                    rtol: float = 1e-12) -> np.ndarray:
    """Moving-average coefficients matching a truncated autocovariance.

    Returns theta[0..m] such that eps_i = sum_k theta[k] Z_{i-k} with iid
    standard normal Z has autocovariance acf[j] at lags |j| <= m and zero
    beyond.  Computed with the innovations recursion, iterated until the
    innovation variance converges; the fixed-point row is the answer.
    """
    gamma = np.asarray(acf, dtype=float)
    m = gamma.size - 1
    if gamma[0] <= 0:
        raise ValueError("acf[0] must be positive")
    if min_iterations is None:
        min_iterations = 4 * (m + 1)
    max_iterations = max(10 * (m + 1), 2000)

    # innovations recursion; rows only ever have m non-zero trailing entries
    v = [gamma[0]]
    thetas = [np.zeros(0)]  # thetas[k][h-1] = theta_{k,h}, h = 1..min(k, m)
    for k in range(1, max_iterations + 1):
        width = min(k, m)
        row = np.zeros(width)
        for h in range(width, 0, -1):
            j = k - h
            acc = gamma[h] if h <= m else 0.0
            # only lags within m contribute to the inner products
            for i in range(max(0, k - m), j):
                acc -= thetas[j][j - i - 1] * row[k - i - 1] * v[i]
            row[h - 1] = acc / v[j]
        vk = gamma[0] - np.sum(row ** 2 * np.array([v[k - h] for h in range(1, width + 1)]))
        if vk <= 0:
            raise ValueError("autocovariance is not positive definite")
        thetas.append(row)
        v.append(vk)
        if k >= min_iterations and abs(v[k] - v[k - 1]) <= rtol * v[k - 1]:
            break
    scale = np.sqrt(v[-1])
    theta = np.zeros(m + 1)
    theta[0] = scale
    theta[1: len(thetas[-1]) + 1] = scale * thetas[-1][:m]
    return theta


def _ma_noise(theta: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(n + theta.size - 1)
    return np.convolve(z, theta, mode="valid")


_THETA_CACHE: dict[bytes, np.ndarray] = {}


def _cached_theta(filt: TruncatedFilter) -> np.ndarray:
    key = filt.correlation.tobytes()
    theta = _THETA_CACHE.get(key)
    if theta is None:
        theta = ma_coefficients(filt.correlation)
        _THETA_CACHE[key] = theta
    return theta


def _violet_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    # MA(1) with coefficients (0.8, -0.6); unit marginal variance
    return _ma_noise(np.array(VIOLET_COEFFS), n, rng)


#: normalized corner below which the 1/f spectrum levels off; physical
#: flicker generators are flat at very low frequencies (for 10 kHz sampling
#: this corner sits at 20 Hz)
PINK_CORNER = 0.002


def _pink_noise(n: int, rng: np.random.Generator,
                corner: float = PINK_CORNER) -> np.ndarray:
    """Gaussian 1/f noise by spectral synthesis, unit sample SD.

    Independent Gaussian spectral coefficients are shaped so the power
    density falls off as 1/f above the corner and levels off below it; this
    keeps sample paths smooth (no generator steps) while bounding the slow
    wander the way hardware flicker noise does.
    """
    if n < 2:
        return np.zeros(n)
    freqs = np.fft.rfftfreq(n)
    shape = np.zeros(freqs.size)
    shape[1:] = 1.0 / np.sqrt(np.maximum(freqs[1:], corner))
    coeffs = (rng.standard_normal(freqs.size)
              + 1j * rng.standard_normal(freqs.size)) * shape
    coeffs[0] = 0.0
    out = np.fft.irfft(coeffs, n)
    sd = out.std()
    if sd == 0:
        return out
    return out / sd


def _discrete_kernel_taps(filt: TruncatedFilter, oversampling: int = 1) -> np.ndarray:
    """Sampled truncated kernel, normalized to unit noise gain."""
    rate = filt.sampling_rate * oversampling
    taps = filt.kernel(np.arange(filt.m * oversampling + 1) / rate)
    return taps / np.sqrt(np.sum(taps ** 2))


def _discrete_filtered_white(filt: TruncatedFilter, n: int,
                             rng: np.random.Generator) -> np.ndarray:
    return _ma_noise(_discrete_kernel_taps(filt), n, rng)


def _heterogeneous_noise(signal: StepSignal, filt: TruncatedFilter, n: int,
                         noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """White noise with event-dependent scale, filtered at an oversampled
    rate and decimated back to the sampling grid."""
    over = noise.oversampling
    rate = filt.sampling_rate * over
    taps = _discrete_kernel_taps(filt, over)
    warmup = taps.size - 1
    total = n * over + warmup
    # time of oversampled point o (0-based) is (o + 1 - warmup) / rate
    t = (np.arange(total) + 1.0 - warmup) / rate
    baseline = signal.levels[0]
    sd = np.where(signal.value_at(np.clip(t, 0.0, None)) == baseline,
                  noise.sigma0, noise.event_sigma)
    z = rng.standard_normal(total) * sd
    filtered = np.convolve(z, taps, mode="valid")
    return filtered[over - 1::over][:n]


def simulate_trace(signal: StepSignal, filt: TruncatedFilter, noise: NoiseModel,
                   n: int, seed: int) -> Trace:
    """Sample a trace: exact convolution mean plus the requested noise.

    Deterministic given the seed.
    """
    if signal.end_time < n / filt.sampling_rate:
        raise ValueError("signal does not cover the requested samples")
    rng = np.random.default_rng(seed)
    mean = sample_exact(signal, filt, n)

    kind = noise.kind
    if noise.sigma0 == 0 and kind != "heterogeneous":
        return Trace(mean, filt.sampling_rate)

    if kind == "filtered_white":
        eps = noise.sigma0 * _ma_noise(_cached_theta(filt), n, rng)
    elif kind in ("violet_mix", "pink_mix"):
        base = _discrete_filtered_white(filt, n, rng)
        if kind == "violet_mix":
            extra = _violet_noise(n, rng)
        else:
            extra = _pink_noise(n, rng)
        eps = noise.sigma0 * (np.sqrt(1.0 - noise.mix_fraction) * base
                              + np.sqrt(noise.mix_fraction) * extra)
    elif kind == "heterogeneous":
        eps = _heterogeneous_noise(signal, filt, n, noise, rng)
    else:  # pragma: no cover - guarded by NoiseModel
        raise ValueError(f"unknown noise kind {kind!r}")
    return Trace(mean + eps, filt.sampling_rate)


def simulate_hmm(spec: HmmSpec, duration: float, seed: int,
                 initial_state: int = 0) -> StepSignal:
    """Continuous-time Markov jump trajectory emitted as a step signal.

    Dwell times are exponential with the state's exit rate; the next state
    follows the embedded chain.  Sojourns in equal levels are merged so the
    result has no zero-height changes.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    k = spec.levels.size
    times, levels = [], []
    state = initial_state
    now = 0.0
    levels.append(spec.levels[state])
    while True:
        now += rng.exponential(1.0 / spec.exit_rates[state])
        if now >= duration or k == 1:
            break
        state = int(rng.choice(k, p=spec.transition_probs[state]))
        if spec.levels[state] != levels[-1]:
            times.append(now)
            levels.append(spec.levels[state])
    return StepSignal(np.array(times), np.array(levels), duration)
