"""Estimation step: segment classification and local deconvolution.

Detected segments long enough to contain observations untouched by the
filter transient get their level from a median and anchor the rest: between
two such segments, the change locations (and the level of a single short
segment) are refined by minimizing a regularized Gaussian quadratic form
whose mean is the exact filtered candidate signal.  The search runs on a
sample-aligned grid followed by two ten-fold refinements, so change times
end up with 1/100 sample resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular, toeplitz

from .detect import DetectionConfig, estimate_sigma, fit_segmentation, \
    make_context, postfilter, resolve_q
from .filters import TruncatedFilter
from .signal import StepSignal, Trace

__all__ = [
    "SegmentClasses", "Idealization", "IllConditionedCovariance",
    "classify_segments", "local_deconvolve", "jules",
    "LONG_SEGMENT_MIN_INTERIOR", "REFINEMENT_ROUNDS", "REFINEMENT_FACTOR",
]

#: a segment is long when its interior holds at least this many observations
LONG_SEGMENT_MIN_INTERIOR = 10

REFINEMENT_ROUNDS = 2
REFINEMENT_FACTOR = 10

#: marker for a level that was never idealized (short segment kept as-is)
PROV_DETECTION = "detection-only"
PROV_MEDIAN = "long-median"
PROV_DECONVOLVED = "deconvolved"


class IllConditionedCovariance(RuntimeError):
    """Covariance factorization failed; use a regularization gamma2 > 0."""


@dataclass(frozen=True)
class SegmentClasses:
    """Long/short labels plus the pre-estimated levels of long segments."""

    labels: tuple
    medians: np.ndarray = field(repr=False)
    interiors: tuple = field(repr=False)

    @property
    def long_indices(self) -> np.ndarray:
        return np.nonzero(np.array([lab == "long" for lab in self.labels]))[0]


@dataclass(frozen=True)
class Idealization:
    """Final reconstruction with per-segment provenance and diagnostics."""

    signal: StepSignal
    provenance: tuple
    sigma_hat: float
    q_used: float
    gamma2: float

    def __post_init__(self):
        if len(self.provenance) != self.signal.levels.size:
            raise ValueError("one provenance entry per segment required")


def _segment_samples(seg: StepSignal, fs: float, n: int) -> np.ndarray:
    """First governed 1-based sample of each segment, plus sentinel n + 1."""
    starts = np.round(seg.change_times * fs).astype(int)
    if np.any(np.abs(seg.change_times * fs - starts) > 1e-6):
        raise ValueError("segmentation is not grid aligned")
    return np.concatenate(([1], starts, [n + 1]))


def classify_segments(trace: Trace, seg: StepSignal,
                      filt: TruncatedFilter) -> SegmentClasses:
    """Split segments into long and short; long levels become medians.

    The interior of a segment discards the first m samples (transient of its
    own change) and the last m samples (the following change may truly sit
    up to m samples before its detected position).  A middle segment of d
    samples therefore has d - 2m interior observations and is long from
    d = 2m + 10 on; the first and last segments only lose one side.
    """
    fs = trace.sampling_rate
    n = trace.n
    m = filt.m
    bounds = _segment_samples(seg, fs, n)
    labels = []
    medians = np.full(seg.levels.size, np.nan)
    interiors = []
    for i in range(seg.levels.size):
        first, nxt = bounds[i], bounds[i + 1]
        lo = first if i == 0 else first + m
        hi = n if i == seg.levels.size - 1 else nxt - m - 1
        count = hi - lo + 1
        if count >= LONG_SEGMENT_MIN_INTERIOR:
            labels.append("long")
            medians[i] = np.median(trace.values[lo - 1: hi])
        else:
            labels.append("short")
            lo, hi = 0, -1
        interiors.append((lo, hi))
    return SegmentClasses(tuple(labels), medians, tuple(interiors))


class _BlockSolver:
    """Shared covariance machinery for all deconvolution blocks of a trace."""

    def __init__(self, filt: TruncatedFilter, sigma: float, gamma2: float):
        if gamma2 < 0:
            raise ValueError("gamma2 must be non-negative")
        self.filt = filt
        self.sigma = sigma
        self.gamma2 = gamma2
        self._chol = {}

    def cholesky(self, size: int) -> np.ndarray:
        L = self._chol.get(size)
        if L is None:
            rho = np.zeros(size)
            upto = min(size, self.filt.m + 1)
            rho[:upto] = self.filt.correlation[:upto]
            cov = self.sigma ** 2 * toeplitz(rho) + self.gamma2 * np.eye(size)
            try:
                L = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as err:
                raise IllConditionedCovariance(
                    "covariance factorization failed; set gamma2 > 0") from err
            self._chol[size] = L
        return L

    def whiten(self, L: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Solve L z = r for every row r; rows shape (k, size)."""
        return solve_triangular(L, rows.T, lower=True, check_finite=False).T


def _candidate_grid(center: float, step: float, lo: float, hi: float,
                    factor: int) -> np.ndarray:
    pts = center + step * np.arange(-factor, factor + 1) / factor
    pts = np.clip(pts, lo, hi)
    return np.unique(pts)


def _deconvolve_jump(y_win, t_win, solver, left_level, right_level, grid0,
                     lo, hi):
    """Best change time for a single jump between two fixed levels.

    Returns the time and the per-round best objective values (the rounds
    only ever improve because each refinement grid contains the incumbent).
    """
    L = solver.cholesky(y_win.size)
    step_of = solver.filt.step_response
    grid = grid0
    step = 1.0 / solver.filt.sampling_rate
    best_tau = grid[0]
    history = []
    for round_ in range(REFINEMENT_ROUNDS + 1):
        ramps = step_of(t_win[None, :] - grid[:, None])
        means = left_level + (right_level - left_level) * ramps
        z = solver.whiten(L, y_win[None, :] - means)
        obj = np.einsum("ij,ij->i", z, z)
        k = int(np.argmin(obj))
        best_tau = grid[k]
        history.append(float(obj[k]))
        if round_ < REFINEMENT_ROUNDS:
            grid = _candidate_grid(best_tau, step, lo, hi, REFINEMENT_FACTOR)
            step /= REFINEMENT_FACTOR
    return float(best_tau), history


def _deconvolve_peak(y_win, t_win, solver, left_level, right_level,
                     grid_a, grid_b, lo_a, hi_a, lo_b, hi_b, min_gap):
    """Jointly refine the two change times and the level of a short segment
    flanked by two long ones; the level solves generalized least squares in
    closed form for every candidate pair."""
    L = solver.cholesky(y_win.size)
    step_of = solver.filt.step_response
    step = 1.0 / solver.filt.sampling_rate
    ga, gb = grid_a, grid_b
    best = (ga[0], gb[-1], left_level)
    history = []
    for round_ in range(REFINEMENT_ROUNDS + 1):
        ta, tb = np.meshgrid(ga, gb, indexing="ij")
        ta, tb = ta.ravel(), tb.ravel()
        ok = tb - ta >= min_gap
        if not np.any(ok):
            ok = tb - ta > 0
        ta, tb = ta[ok], tb[ok]
        ramp_a = step_of(t_win[None, :] - ta[:, None])
        ramp_b = step_of(t_win[None, :] - tb[:, None])
        base = left_level + (right_level * ramp_b - left_level * ramp_a)
        phi = ramp_a - ramp_b
        z = solver.whiten(L, y_win[None, :] - base)
        f = solver.whiten(L, phi)
        denom = np.einsum("ij,ij->i", f, f)
        num = np.einsum("ij,ij->i", f, z)
        levels = np.divide(num, denom, out=np.zeros_like(num),
                           where=denom > 0)
        resid = z - levels[:, None] * f
        obj = np.einsum("ij,ij->i", resid, resid)
        k = int(np.argmin(obj))
        best = (float(ta[k]), float(tb[k]), float(levels[k]))
        history.append(float(obj[k]))
        if round_ < REFINEMENT_ROUNDS:
            ga = _candidate_grid(best[0], step, lo_a, hi_a, REFINEMENT_FACTOR)
            gb = _candidate_grid(best[1], step, lo_b, hi_b, REFINEMENT_FACTOR)
            step /= REFINEMENT_FACTOR
    return best + (history,)


def local_deconvolve(trace: Trace, seg: StepSignal, classes: SegmentClasses,
                     filt: TruncatedFilter, gamma2: float = 1.0,
                     sigma: float | None = None,
                     q_used: float = float("nan")) -> Idealization:
    """Refine change times and short-segment levels between long segments.

    Blocks bounded by two long segments and holding at most one short
    segment are deconvolved; longer runs of short segments keep their
    detection-step reconstruction, as do leading/trailing shorts without a
    long anchor on both sides.
    """
    if sigma is None:
        sigma = estimate_sigma(trace, filt)
    fs = trace.sampling_rate
    n = trace.n
    m = filt.m
    solver = _BlockSolver(filt, sigma, gamma2)
    bounds = _segment_samples(seg, fs, n)

    times = seg.change_times.astype(float).copy()
    levels = seg.levels.astype(float).copy()
    provenance = [PROV_DETECTION] * levels.size
    for i in np.nonzero(~np.isnan(classes.medians))[0]:
        levels[i] = classes.medians[i]
        provenance[i] = PROV_MEDIAN

    long_idx = classes.long_indices
    grid_step = 1.0 / fs
    min_gap = grid_step / REFINEMENT_FACTOR ** REFINEMENT_ROUNDS
    for a, b in zip(long_idx[:-1], long_idx[1:]):
        shorts = b - a - 1
        if shorts > 1:
            continue
        c_first, c_last = bounds[a + 1], bounds[b]
        w_lo, w_hi = c_first - m + 1, c_last + m - 1
        if w_lo < 1 or w_hi > n:
            continue
        y_win = trace.values[w_lo - 1: w_hi]
        t_win = np.arange(w_lo, w_hi + 1) / fs
        if shorts == 0:
            grid = (c_first - m + np.arange(m + 1)) / fs
            times[a], _ = _deconvolve_jump(
                y_win, t_win, solver, levels[a], levels[b], grid,
                grid[0], grid[-1])
        else:
            grid_a = (c_first - m + np.arange(m + 1)) / fs
            grid_b = (c_last - m + np.arange(m + 1)) / fs
            ta, tb, level, _ = _deconvolve_peak(
                y_win, t_win, solver, levels[a], levels[b],
                grid_a, grid_b, grid_a[0], grid_a[-1], grid_b[0], grid_b[-1],
                min_gap)
            times[a] = ta
            times[a + 1] = tb
            levels[a + 1] = level
            provenance[a + 1] = PROV_DECONVOLVED

    signal, provenance = _assemble(times, levels, provenance, seg.end_time)
    return Idealization(signal=signal, provenance=tuple(provenance),
                        sigma_hat=float(sigma), q_used=float(q_used),
                        gamma2=float(gamma2))


def _assemble(times, levels, provenance, end_time,
              tol: float = 1e-9) -> tuple:
    """Drop (numerically) zero-height changes left over from refinement."""
    keep_times, keep_levels, keep_prov = [], [levels[0]], [provenance[0]]
    for k in range(times.size):
        if abs(levels[k + 1] - keep_levels[-1]) <= tol:
            continue
        keep_times.append(times[k])
        keep_levels.append(levels[k + 1])
        keep_prov.append(provenance[k + 1])
    signal = StepSignal(np.array(keep_times), np.array(keep_levels), end_time)
    return signal, keep_prov


def jules(trace: Trace, config: DetectionConfig | None = None,
          filt: TruncatedFilter | None = None, gamma2: float = 1.0,
          sigma: float | None = None, q: float | None = None,
          workers: int | None = None) -> Idealization:
    """Full pipeline: noise scale, critical value, constrained segmentation,
    postfilter, classification, local deconvolution."""
    if filt is None:
        raise ValueError("a truncated filter is required")
    if config is None:
        config = DetectionConfig()
    if sigma is None:
        sigma = estimate_sigma(trace, filt)
    if q is None:
        q = resolve_q(config, trace.n, filt, workers=workers)
    ctx = make_context(trace, filt, sigma=sigma,
                       penalty_n=config.calibration_n)
    seg = fit_segmentation(trace, ctx, q)
    seg = postfilter(seg, filt)
    classes = classify_segments(trace, seg, filt)
    return local_deconvolve(trace, seg, classes, filt, gamma2=gamma2,
                            sigma=sigma, q_used=q)
