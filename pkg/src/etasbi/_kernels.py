"""Compiled inner loops for the quadratic-cost likelihood pieces."""
import numba
import numpy as np

# no nnan/ninf: the kernels rely on inf and NaN checks
_FAST = {"reassoc", "contract", "afn", "arcp"}


@numba.njit(cache=True, fastmath=_FAST)
def log_intensity_sum(times, weights, mu, c, p):
    """Sum over events of log(mu + sum_{j<i} w_j h(t_i - t_j))."""
    n = times.size
    scale = (p - 1.0) / c
    total = 0.0
    for i in range(n):
        lam = 0.0
        ti = times[i]
        for j in range(i):
            lam += weights[j] * np.exp(-p * np.log(1.0 + (ti - times[j]) / c))
        lam = mu + scale * lam
        if not lam > 0.0:
            return -np.inf
        total += np.log(lam)
    return total


@numba.njit(cache=True)
def compensator_on_grid(times, weights, mu, c, p, grid):
    """mu t + sum_{t_i < t} w_i H(t - t_i) for each grid point."""
    out = np.empty(grid.size)
    n = times.size
    for g in range(grid.size):
        t = grid[g]
        acc = mu * t
        for i in range(n):
            if times[i] >= t:
                break
            acc += weights[i] * (1.0 - (1.0 + (t - times[i]) / c) ** (1.0 - p))
        out[g] = acc
    return out


@numba.njit(cache=True)
def parent_mass_rows(times, weights, mu, c, p, i):
    """Unnormalized parent masses for event i: index 0 background, j+1 event j."""
    scale = (p - 1.0) / c
    row = np.empty(i + 1)
    row[0] = mu
    for j in range(i):
        row[j + 1] = weights[j] * scale * np.exp(-p * np.log(1.0 + (times[i] - times[j]) / c))
    return row


@numba.njit(cache=True, fastmath=_FAST)
def draw_branching(times, weights, mu, c, p, uniforms, tol):
    """Sample a parent for every event by inverse CDF.

    Candidate parents are scanned from the nearest one backwards and the
    scan stops once the target mass is reached or the remaining mass is
    below ``tol`` of the total.  Returns 1-based parents, 0 for background.
    """
    n = times.size
    scale = (p - 1.0) / c
    parents = np.zeros(n, dtype=np.int64)
    masses = np.empty(n)
    for i in range(n):
        ti = times[i]
        total = mu
        for j in range(i):
            m = weights[j] * scale * np.exp(-p * np.log(1.0 + (ti - times[j]) / c))
            masses[j] = m
            total += m
        target = uniforms[i] * total
        acc = 0.0
        chosen = 0
        for j in range(i - 1, -1, -1):
            acc += masses[j]
            if acc >= target:
                chosen = j + 1
                break
            if total - mu - acc <= tol * total:
                # remaining older parents carry negligible mass
                break
        parents[i] = chosen
    return parents


@numba.njit(cache=True)
def ripley_pair_counts(times, windows):
    """One-sided pair counts #{(i, j): 0 < t_j - t_i <= w} per window.

    Single forward sweep with one leading pointer per window.
    """
    n = times.size
    nw = windows.size
    counts = np.zeros(nw, dtype=np.int64)
    ptr = np.zeros(nw, dtype=np.int64)
    for k in range(nw):
        ptr[k] = 0
    for i in range(n):
        ti = times[i]
        for k in range(nw):
            j = ptr[k]
            if j < i + 1:
                j = i + 1
            while j < n and times[j] - ti <= windows[k]:
                j += 1
            ptr[k] = j
            counts[k] += j - i - 1
    return counts


@numba.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@numba.njit(cache=True, fastmath=_FAST)
def draw_branching_binned(times, weights, mu, c, p, seed):
    """Exact parent draw by rejection from a lag-binned envelope.

    Lags are grouped into bins [L_b, L_{b+1}) with L_b = c (2^(b/p) - 1), so
    the Omori density falls by exactly half across each bin.  Each bin's
    envelope mass is (sum of its weights) * h(L_b); a proposal picks a bin,
    then an event inside it proportionally to its weight, and is accepted
    with probability h(lag) / h(L_b) >= 1/2.  Background proposals are
    always accepted.  Cost per event is O(bins * log n) instead of O(n).
    """
    np.random.seed(seed)
    n = times.size
    parents = np.zeros(n, dtype=np.int64)
    cw = np.zeros(n + 1)
    for j in range(n):
        cw[j + 1] = cw[j] + weights[j]
    h0 = (p - 1.0) / c
    delta = np.log(2.0) / p
    nbin_max = int(np.log(1.0 + (times[-1] - times[0]) / c) / delta) + 2 if n else 1
    lo_idx = np.empty(nbin_max, dtype=np.int64)
    hi_idx = np.empty(nbin_max, dtype=np.int64)
    bmass = np.empty(nbin_max)
    for i in range(n):
        ti = times[i]
        total = mu
        hi = i
        nb = 0
        b = 0
        while hi > 0:
            edge = c * (np.exp((b + 1) * delta) - 1.0)
            # first index with t_j >= ti - edge, searching in [0, hi)
            left = 0
            right = hi
            target = ti - edge
            while left < right:
                mid = (left + right) >> 1
                if times[mid] < target:
                    left = mid + 1
                else:
                    right = mid
            lo_idx[nb] = left
            hi_idx[nb] = hi
            m = (cw[hi] - cw[left]) * h0 * np.exp(-b * np.log(2.0))
            bmass[nb] = m
            total += m
            nb += 1
            hi = left
            b += 1
        while True:
            r = np.random.random() * total
            if r < mu or nb == 0:
                parents[i] = 0
                break
            r -= mu
            k = 0
            while k < nb - 1 and r >= bmass[k]:
                r -= bmass[k]
                k += 1
            lo = lo_idx[k]
            hi = hi_idx[k]
            if cw[hi] - cw[lo] <= 0.0:
                continue
            target = cw[lo] + np.random.random() * (cw[hi] - cw[lo])
            left = lo
            right = hi - 1
            while left < right:
                mid = (left + right) >> 1
                if cw[mid + 1] <= target:
                    left = mid + 1
                else:
                    right = mid
            j = left
            lag = ti - times[j]
            # h(lag) / h(L_k) with L_k = c (2^(k/p) - 1)
            ratio = np.exp(-p * np.log(1.0 + lag / c) + k * np.log(2.0))
            if np.random.random() < ratio:
                parents[i] = j + 1
                break
    return parents
