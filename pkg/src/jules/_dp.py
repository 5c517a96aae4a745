"""Compiled kernels for the constrained segmentation dynamic program.

The multiresolution constraint confines each candidate block's constant to
an interval: intersecting, over every dyadic-length window inside the
block, ``mean +- sd * (q + penalty) / length``.  A block is feasible when
that intersection is non-empty.  Both the pruned production routine and an
unpruned reference (used to validate the pruning) live here; they share the
bound formulas so agreement is exact.

Index conventions: observations are a 0-based array ``y``; ``P`` and ``Q``
are prefix sums of ``y`` and ``y**2`` with a leading zero.  A block ``(i, j]``
covers ``y[i:j]``; a window of length ``L`` starting at ``u`` covers
``y[u:u+L]``.  Boundaries returned by the programs are block starts, i.e.
0-based indices of the first observation governed by the new level.
"""

import numpy as np
from numba import njit

NEG_INF = -np.inf
POS_INF = np.inf


@njit(cache=True, inline="always")
def _window_mean(P, u, L):
    return (P[u + L] - P[u]) / L


@njit(cache=True)
def block_bounds(P, i, j, lengths, halfw):
    """Exhaustive [lower, upper] bound scan for the block (i, j]."""
    lo = NEG_INF
    up = POS_INF
    blen = j - i
    for s in range(lengths.size):
        L = lengths[s]
        if L > blen:
            break
        for u in range(i, j - L + 1):
            mean = _window_mean(P, u, L)
            v = mean - halfw[s]
            if v > lo:
                lo = v
            v = mean + halfw[s]
            if v < up:
                up = v
    return lo, up


@njit(cache=True)
def _block_cost(P, Q, i, j, lo, up):
    """Least-squares cost of the block with its constant clipped into
    [lo, up]; returns (cost, fitted value)."""
    blen = j - i
    ssum = P[j] - P[i]
    mean = ssum / blen
    c = mean
    if c < lo:
        c = lo
    elif c > up:
        c = up
    cost = (Q[j] - Q[i]) - 2.0 * c * ssum + blen * c * c
    return cost, c


@njit(cache=True)
def dp_segment(P, Q, lengths, halfw, max_blocks):
    """Minimal-jump constrained least-squares segmentation, pruned.

    Returns (status, boundaries, values).  status 0 is success; 1 means the
    block count exceeded max_blocks.

    The forward pass tracks, per right endpoint j, the smallest feasible
    block start imin(j).  Feasibility tightens as blocks grow, so imin is
    monotone and one pointer suffices; per-scale monotone deques over the
    window make each bound lookup amortized O(1) plus a binary search for
    candidates right of imin.  Left endpoints with too few blocks or an
    infeasible block are never visited, which is where the pruning saves
    the quadratic worst case.
    """
    n = P.size - 1
    S = lengths.size

    # flat deque storage, one segment per scale
    offs = np.zeros(S + 1, dtype=np.int64)
    for s in range(S):
        cap = n - lengths[s] + 1
        if cap < 0:
            cap = 0
        offs[s + 1] = offs[s] + cap
    lo_idx = np.empty(offs[S], dtype=np.int32)
    up_idx = np.empty(offs[S], dtype=np.int32)
    lo_head = np.zeros(S, dtype=np.int64)
    lo_tail = np.zeros(S, dtype=np.int64)
    up_head = np.zeros(S, dtype=np.int64)
    up_tail = np.zeros(S, dtype=np.int64)

    B = np.zeros(n + 1, dtype=np.int64)
    R = np.zeros(n + 1, dtype=np.float64)
    bp = np.full(n + 1, -1, dtype=np.int64)
    first_b = np.zeros(n + 2, dtype=np.int64)
    imin = 0

    for j in range(1, n + 1):
        # admit the windows that end at sample j
        for s in range(S):
            L = lengths[s]
            if L > j:
                break
            u = j - L
            mean = _window_mean(P, u, L)
            vlo = mean - halfw[s]
            vup = mean + halfw[s]
            t = lo_tail[s]
            while t > lo_head[s]:
                pu = lo_idx[offs[s] + t - 1]
                if _window_mean(P, pu, L) - halfw[s] <= vlo:
                    t -= 1
                else:
                    break
            lo_idx[offs[s] + t] = u
            lo_tail[s] = t + 1
            t = up_tail[s]
            while t > up_head[s]:
                pu = up_idx[offs[s] + t - 1]
                if _window_mean(P, pu, L) + halfw[s] >= vup:
                    t -= 1
                else:
                    break
            up_idx[offs[s] + t] = u
            up_tail[s] = t + 1

        # grow imin until the window (imin, j] is feasible
        while True:
            lo = NEG_INF
            up = POS_INF
            for s in range(S):
                base = offs[s]
                while lo_head[s] < lo_tail[s] and lo_idx[base + lo_head[s]] < imin:
                    lo_head[s] += 1
                while up_head[s] < up_tail[s] and up_idx[base + up_head[s]] < imin:
                    up_head[s] += 1
                L = lengths[s]
                if lo_head[s] < lo_tail[s]:
                    u = lo_idx[base + lo_head[s]]
                    v = _window_mean(P, u, L) - halfw[s]
                    if v > lo:
                        lo = v
                if up_head[s] < up_tail[s]:
                    u = up_idx[base + up_head[s]]
                    v = _window_mean(P, u, L) + halfw[s]
                    if v < up:
                        up = v
            if lo <= up:
                break
            imin += 1

        B[j] = B[imin] + 1
        if B[j] > max_blocks:
            return 1, np.empty(0, dtype=np.int64), np.empty(0)
        if B[j] > B[j - 1] or j == 1:
            first_b[B[j]] = j

        # candidates: exactly the feasible starts with one block less
        c2 = first_b[B[j]] - 1
        best = POS_INF
        besti = -1
        for i in range(imin, c2 + 1):
            blen = j - i
            lo = NEG_INF
            up = POS_INF
            for s in range(S):
                L = lengths[s]
                if L > blen:
                    break
                base = offs[s]
                # first deque entry with start >= i bounds the suffix window
                h = lo_head[s]
                t = lo_tail[s]
                while h < t:
                    mid = (h + t) // 2
                    if lo_idx[base + mid] < i:
                        h = mid + 1
                    else:
                        t = mid
                if h < lo_tail[s]:
                    u = lo_idx[base + h]
                    v = _window_mean(P, u, L) - halfw[s]
                    if v > lo:
                        lo = v
                h = up_head[s]
                t = up_tail[s]
                while h < t:
                    mid = (h + t) // 2
                    if up_idx[base + mid] < i:
                        h = mid + 1
                    else:
                        t = mid
                if h < up_tail[s]:
                    u = up_idx[base + h]
                    v = _window_mean(P, u, L) + halfw[s]
                    if v < up:
                        up = v
            if lo > up:
                continue
            cost, _ = _block_cost(P, Q, i, j, lo, up)
            total = R[i] + cost
            if total < best:
                best = total
                besti = i
        R[j] = best
        bp[j] = besti

    k = B[n] - 1
    boundaries = np.empty(k, dtype=np.int64)
    values = np.empty(k + 1, dtype=np.float64)
    j = n
    for b in range(k, -1, -1):
        i = bp[j]
        lo, up = block_bounds(P, i, j, lengths, halfw)
        _, values[b] = _block_cost(P, Q, i, j, lo, up)
        if b > 0:
            boundaries[b - 1] = i
        j = i
    return 0, boundaries, values


@njit(cache=True)
def dp_segment_reference(P, Q, lengths, halfw, max_blocks):
    """Unpruned quadratic reference of dp_segment; identical contract."""
    n = P.size - 1
    B = np.zeros(n + 1, dtype=np.int64)
    R = np.zeros(n + 1, dtype=np.float64)
    bp = np.full(n + 1, -1, dtype=np.int64)

    feas_lo = np.empty(n + 1, dtype=np.float64)
    feas_up = np.empty(n + 1, dtype=np.float64)
    for j in range(1, n + 1):
        # bounds of every block (i, j], built by extending leftwards
        lo = NEG_INF
        up = POS_INF
        for i in range(j - 1, -1, -1):
            blen = j - i
            for s in range(lengths.size):
                L = lengths[s]
                if L > blen:
                    break
                if i + L <= j:
                    mean = _window_mean(P, i, L)
                    v = mean - halfw[s]
                    if v > lo:
                        lo = v
                    v = mean + halfw[s]
                    if v < up:
                        up = v
            feas_lo[i] = lo
            feas_up[i] = up

        bmin = np.int64(2 ** 60)
        for i in range(0, j):
            if feas_lo[i] <= feas_up[i] and B[i] + 1 < bmin:
                bmin = B[i] + 1
        B[j] = bmin
        if B[j] > max_blocks:
            return 1, np.empty(0, dtype=np.int64), np.empty(0)
        best = POS_INF
        besti = -1
        for i in range(0, j):
            if B[i] != B[j] - 1 or feas_lo[i] > feas_up[i]:
                continue
            cost, _ = _block_cost(P, Q, i, j, feas_lo[i], feas_up[i])
            total = R[i] + cost
            if total < best:
                best = total
                besti = i
        R[j] = best
        bp[j] = besti

    k = B[n] - 1
    boundaries = np.empty(k, dtype=np.int64)
    values = np.empty(k + 1, dtype=np.float64)
    j = n
    for b in range(k, -1, -1):
        i = bp[j]
        lo, up = block_bounds(P, i, j, lengths, halfw)
        _, values[b] = _block_cost(P, Q, i, j, lo, up)
        if b > 0:
            boundaries[b - 1] = i
        j = i
    return 0, boundaries, values


@njit(cache=True)
def exhaustive_segment(P, Q, lengths, halfw, max_changes):
    """Brute-force minimal-jump constrained least squares, for small n.

    Enumerates every boundary combination with up to max_changes changes in
    lexicographic order and keeps the first minimum, mirroring the DP's
    leftmost tie rule.  Only meant for n up to a few dozen.
    """
    n = P.size - 1
    for k in range(0, max_changes + 1):
        best = POS_INF
        best_bounds = np.empty(k, dtype=np.int64)
        found = False
        bounds = np.empty(k, dtype=np.int64)
        for b in range(k):
            bounds[b] = b + 1
        while True:
            # evaluate the partition 0 | bounds | n
            total = 0.0
            prev = 0
            ok = True
            for b in range(k + 1):
                j = n if b == k else bounds[b]
                lo, up = block_bounds(P, prev, j, lengths, halfw)
                if lo > up:
                    ok = False
                    break
                cost, _ = _block_cost(P, Q, prev, j, lo, up)
                total += cost
                prev = j
            if ok and total < best:
                best = total
                best_bounds = bounds.copy()
                found = True
            if k == 0:
                break
            # next combination of k boundaries out of 1..n-1
            pos = k - 1
            while pos >= 0 and bounds[pos] == n - k + pos:
                pos -= 1
            if pos < 0:
                break
            bounds[pos] += 1
            for b in range(pos + 1, k):
                bounds[b] = bounds[b - 1] + 1
        if found:
            values = np.empty(k + 1, dtype=np.float64)
            prev = 0
            for b in range(k + 1):
                j = n if b == k else best_bounds[b]
                lo, up = block_bounds(P, prev, j, lengths, halfw)
                _, values[b] = _block_cost(P, Q, prev, j, lo, up)
                prev = j
            return 0, best_bounds, values
    return 1, np.empty(0, dtype=np.int64), np.empty(0)


@njit(cache=True)
def max_null_statistic(cumsum, lengths, sd_sum, penalties):
    """Max over all dyadic windows of |window sum| / sd - penalty.

    `cumsum` carries a leading zero; used against the true constant in the
    Monte Carlo calibration, where the candidate mean is already removed.
    """
    n = cumsum.size - 1
    best = NEG_INF
    for s in range(lengths.size):
        L = lengths[s]
        if L > n:
            break
        inv = 1.0 / sd_sum[s]
        pen = penalties[s]
        for u in range(0, n - L + 1):
            v = abs(cumsum[u + L] - cumsum[u]) * inv - pen
            if v > best:
                best = v
    return best
