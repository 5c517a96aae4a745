"""Detection step: noise scale, Monte Carlo critical values, multiresolution
constraint, constrained segmentation, postfiltering.

The acceptance region tests standardized partial sums of residuals on every
interval holding a dyadic number of observations.  A candidate step function
passes when, on each interval where it is constant,

    |sum of residuals| / sd(sum)  <=  q + sqrt(2 log(e n / length)),

with sd(sum) from the truncated filter autocorrelation.  The segmentation
picks, among all passing step functions, one with the fewest changes and
minimal residual sum of squares, computed by a pruned dynamic program.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import _dp
from .filters import TruncatedFilter
from .noise import derived_seed, ma_coefficients
from .signal import StepSignal, Trace

__all__ = [
    "DetectionConfig", "MultiscaleContext", "NoFeasibleSegmentation",
    "estimate_sigma", "penalty", "make_context", "multiscale_statistic",
    "multiscale_quantile", "fit_segmentation", "postfilter",
]

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "JULES_CACHE_DIR"

#: reps are processed in fixed-size chunks so results do not depend on the
#: worker count
_QUANTILE_CHUNK = 250

_INV_QUARTILE_WIDTH = 2.0 * norm.ppf(0.75)


class NoFeasibleSegmentation(RuntimeError):
    """No step function within the change budget satisfies the constraint."""


@dataclass(frozen=True)
class DetectionConfig:
    """Detection parameters: either an explicit critical value q or an error
    level alpha to be calibrated by Monte Carlo.

    `calibration_n` fixes the length the acceptance region is calibrated
    for: the Monte Carlo quantile and the scale penalties both use it.  Left
    unset, the analyzed trace's own length is used.  Calibrating on the
    recording length and reusing the region on shorter excerpts keeps one
    universal criterion per measurement setup (and is conservative for the
    shorter trace).
    """

    alpha: float = 0.05
    q: float | None = None
    interval_system: str = "dyadic"
    mc_reps: int = 10000
    seed: int = 2024
    calibration_n: int | None = None

    def __post_init__(self):
        if self.q is None:
            if not (0.0 < self.alpha < 1.0):
                raise ValueError("alpha must lie in (0, 1)")
            if self.mc_reps < 100:
                raise ValueError("need at least 100 Monte Carlo repetitions")
        if self.interval_system != "dyadic":
            raise ValueError("only the dyadic interval system is implemented")


def penalty(length: int, n: int) -> float:
    """Scale calibration sqrt(2 log(e n / length)); decreasing in length."""
    if not (1 <= length <= n):
        raise ValueError("length must lie in 1..n")
    return math.sqrt(2.0 * math.log(math.e * n / length))


def dyadic_lengths(n: int) -> np.ndarray:
    """All window lengths 2^l up to n."""
    return 2 ** np.arange(int(math.floor(math.log2(n))) + 1, dtype=np.int64)


def sum_sd(lengths, rho: np.ndarray, sigma: float) -> np.ndarray:
    """Standard deviation of a window sum of the m-dependent noise,
    sigma * sqrt(L + 2 sum_k (L - k) rho_k), vectorized over lengths."""
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    m = rho.size - 1
    k = np.arange(1, m + 1)
    terms = np.maximum(lengths[:, None] - k[None, :], 0) * rho[None, 1:]
    var = lengths * rho[0] + 2.0 * terms.sum(axis=1)
    return sigma * np.sqrt(var)


@dataclass(frozen=True)
class MultiscaleContext:
    """Precomputed pieces of the multiresolution statistic for one trace."""

    n: int
    sampling_rate: float
    cumulative_sums: np.ndarray = field(repr=False)
    cumulative_squares: np.ndarray = field(repr=False)
    sigma_hat: float = 1.0
    rho: np.ndarray = field(repr=False, default=None)
    lengths: np.ndarray = field(repr=False, default=None)
    sd_sums: np.ndarray = field(repr=False, default=None)
    penalties: np.ndarray = field(repr=False, default=None)

    def scale_sd(self, i: int, j: int) -> float:
        """sd of the sum over observations i..j (1-based, inclusive)."""
        if not (1 <= i <= j <= self.n):
            raise ValueError("need 1 <= i <= j <= n")
        return float(sum_sd(j - i + 1, self.rho, self.sigma_hat)[0])

    def penalty_for(self, length: int) -> float:
        return penalty(length, self.n)


def make_context(trace: Trace, filt: TruncatedFilter,
                 sigma: float | None = None,
                 penalty_n: int | None = None) -> MultiscaleContext:
    """Build the statistic context; estimates the noise scale unless a known
    value is injected (e.g. in simulations).

    `penalty_n` sets the length entering the scale penalties, defaulting to
    the trace length; pass the calibration length when reusing a critical
    value obtained for a longer recording.
    """
    if sigma is None:
        sigma = estimate_sigma(trace, filt)
    y = trace.values
    n = y.size
    if penalty_n is None:
        penalty_n = n
    if penalty_n < n:
        raise ValueError("penalty_n must be at least the trace length")
    lengths = dyadic_lengths(n)
    rho = filt.correlation
    return MultiscaleContext(
        n=n,
        sampling_rate=trace.sampling_rate,
        cumulative_sums=np.concatenate(([0.0], np.cumsum(y))),
        cumulative_squares=np.concatenate(([0.0], np.cumsum(y * y))),
        sigma_hat=float(sigma),
        rho=rho,
        lengths=lengths,
        sd_sums=sum_sd(lengths, rho, float(sigma)),
        penalties=np.array([penalty(int(L), penalty_n) for L in lengths]),
    )


def estimate_sigma(trace: Trace, filt: TruncatedFilter) -> float:
    """Robust noise scale from the IQR of lag-m differences.

    Differences across the filter length are (nearly) uncorrelated pairs, so
    their IQR divided by 2 Phi^{-1}(3/4) sqrt(2) estimates the marginal
    standard deviation; the IQR shrugs off the few differences that straddle
    an actual change.  Returns 0.0 for degenerate (noise-free) data.
    """
    y = trace.values
    m = filt.m
    if y.size <= m + 1:
        raise ValueError("trace shorter than the filter length")
    diffs = y[m:] - y[:-m]
    iqr = np.quantile(diffs, 0.75) - np.quantile(diffs, 0.25)
    return float(iqr) / (_INV_QUARTILE_WIDTH * math.sqrt(2.0 * filt.correlation[0]))


def _standardized(total: float, sd: float) -> float:
    if sd > 0:
        return abs(total) / sd
    return 0.0 if total == 0 else math.inf


def multiscale_statistic(trace: Trace, candidate: StepSignal,
                         ctx: MultiscaleContext) -> float:
    """Max over dyadic windows, inside stretches where the candidate is
    constant, of the penalized standardized residual sum.

    The candidate must be grid aligned; the acceptance region is
    {statistic <= q}.
    """
    fs = trace.sampling_rate
    starts = candidate.change_times * fs
    if np.any(np.abs(starts - np.round(starts)) > 1e-6):
        raise ValueError("candidate change times must sit on the sampling grid")
    # block boundaries as 0-based start indices of each new block
    bounds = np.concatenate(([0], np.round(starts).astype(int) - 1, [ctx.n]))
    cums = ctx.cumulative_sums
    best = -math.inf
    for b in range(candidate.levels.size):
        lo, hi = int(bounds[b]), int(bounds[b + 1])
        if hi > ctx.n or lo < 0 or hi <= lo:
            raise ValueError("candidate changes outside the observation range")
        level = candidate.levels[b]
        blen = hi - lo
        for s, L in enumerate(ctx.lengths):
            L = int(L)
            if L > blen:
                break
            sums = cums[lo + L: hi + 1] - cums[lo: hi + 1 - L] - L * level
            peak = np.max(np.abs(sums))
            val = _standardized(peak, ctx.sd_sums[s]) - ctx.penalties[s]
            best = max(best, val)
    return best


def _null_statistics(n: int, theta: np.ndarray, lengths: np.ndarray,
                     sd_sums: np.ndarray, penalties: np.ndarray,
                     seeds: list[int]) -> np.ndarray:
    out = np.empty(len(seeds))
    pad = np.zeros(1)
    for r, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        z = rng.standard_normal(n + theta.size - 1)
        eps = np.convolve(z, theta, mode="valid")
        cums = np.concatenate((pad, np.cumsum(eps)))
        out[r] = _dp.max_null_statistic(cums, lengths, sd_sums, penalties)
    return out


def _quantile_worker(args):
    return _null_statistics(*args)


def _cache_dir(cache_dir=None) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "jules"


def _quantile_cache_key(n, filt, alpha, reps, seed) -> str:
    payload = {
        "n": int(n),
        "alpha": float(alpha),
        "reps": int(reps),
        "seed": int(seed),
        "interval_system": "dyadic",
        "filter": {
            "m": int(filt.m),
            "sample_hz": filt.sampling_rate,
            "rho": [round(float(r), 12) for r in filt.correlation],
        },
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def multiscale_quantile(n: int, filt: TruncatedFilter, alpha: float = 0.05,
                        reps: int = 10000, seed: int = 2024,
                        workers: int | None = None,
                        cache_dir=None, use_cache: bool = True) -> float:
    """Monte Carlo critical value for the multiresolution statistic.

    Simulates `reps` null traces (constant signal, unit-scale filtered
    noise), evaluates the statistic against the truth and returns the
    empirical (1 - alpha) quantile (upper convention).  Results are cached
    on disk keyed by the full parameter set.
    """
    if reps < 100:
        raise ValueError("need at least 100 repetitions")
    key = _quantile_cache_key(n, filt, alpha, reps, seed)
    cache_file = _cache_dir(cache_dir) / f"quantile-{key}.json"
    if use_cache and cache_file.exists():
        value = json.loads(cache_file.read_text())["q"]
        logger.info("quantile cache hit: n=%d alpha=%g -> q=%.6f", n, alpha, value)
        return float(value)

    lengths = dyadic_lengths(n)
    rho = filt.correlation
    theta = ma_coefficients(rho)
    sd_sums = sum_sd(lengths, rho, 1.0)
    penalties = np.array([penalty(int(L), n) for L in lengths])

    chunks = []
    for start in range(0, reps, _QUANTILE_CHUNK):
        stop = min(start + _QUANTILE_CHUNK, reps)
        seeds = [derived_seed(seed, r) for r in range(start, stop)]
        chunks.append((n, theta, lengths, sd_sums, penalties, seeds))

    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(workers, len(chunks)))
    if workers == 1:
        results = [_quantile_worker(c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_quantile_worker, chunks, chunksize=1))
    stats = np.concatenate(results)
    value = float(np.quantile(stats, 1.0 - alpha, method="higher"))

    if use_cache:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(
            {"q": value, "n": int(n), "alpha": alpha, "reps": reps,
             "seed": seed}))
    return value


def resolve_q(config: DetectionConfig, n: int, filt: TruncatedFilter,
              workers: int | None = None) -> float:
    """Critical value from the config: explicit q wins over alpha."""
    if config.q is not None:
        return float(config.q)
    cal_n = config.calibration_n or n
    return multiscale_quantile(cal_n, filt, config.alpha, config.mc_reps,
                               config.seed, workers=workers)


def fit_segmentation(trace: Trace, ctx: MultiscaleContext, q: float,
                     max_changes: int | None = None) -> StepSignal:
    """Constrained least squares with the minimal number of changes.

    Among all grid step functions satisfying the multiresolution constraint
    at level q, returns one with the fewest changes, breaking ties by the
    residual sum of squares and then by leftmost change positions.
    """
    if not math.isfinite(q):
        raise ValueError("q must be finite")
    n = ctx.n
    if max_changes is None:
        max_changes = max(1, n // 2)
    if q + ctx.penalties[0] < 0:
        raise NoFeasibleSegmentation(
            "q so small that single observations violate the constraint")
    halfw = ctx.sd_sums * (q + ctx.penalties) / ctx.lengths
    status, boundaries, values = _dp.dp_segment(
        ctx.cumulative_sums, ctx.cumulative_squares,
        ctx.lengths, halfw, max_blocks=max_changes + 1)
    if status != 0:
        raise NoFeasibleSegmentation(
            f"no feasible segmentation with at most {max_changes} changes")
    return _blocks_to_signal(boundaries, values, n, ctx.sampling_rate)


def _blocks_to_signal(boundaries, values, n: int, fs: float) -> StepSignal:
    # drop zero-height changes (possible when clipped block values coincide)
    keep = np.diff(values) != 0
    boundaries = np.asarray(boundaries, dtype=float)[keep]
    levels = np.concatenate(([values[0]], np.asarray(values)[1:][keep]))
    # a block starting at 0-based index b first governs sample b+1
    return StepSignal((boundaries + 1.0) / fs, levels, (n + 1) / fs)


def postfilter(seg: StepSignal, filt: TruncatedFilter) -> StepSignal:
    """Merge incremental steps left behind by the filter transient.

    A change smeared over the filter length can surface as a staircase of
    small same-direction steps.  Starting from each change, all subsequent
    segments whose start lies within m/fs of it are merged as long as every
    change involved moves in the same direction; the merged segment starts
    at the first change and takes the last level.
    """
    if seg.change_count < 2:
        return seg
    window = filt.lag_seconds
    times = seg.change_times
    levels = seg.levels
    out_times, out_levels = [], [levels[0]]
    k = 0
    while k < times.size:
        direction = np.sign(levels[k + 1] - levels[k])
        last = k
        while (last + 1 < times.size
               and times[last + 1] - times[k] < window
               and np.sign(levels[last + 2] - levels[last + 1]) == direction):
            last += 1
        out_times.append(times[k])
        out_levels.append(levels[last + 1])
        k = last + 1
    # merging can cancel heights exactly; drop resulting zero jumps
    out_times = np.asarray(out_times)
    out_levels = np.asarray(out_levels)
    keep = np.diff(out_levels) != 0
    return StepSignal(out_times[keep],
                      np.concatenate(([out_levels[0]], out_levels[1:][keep])),
                      seg.end_time)
