"""ETAS log-likelihood, compensator, maximum likelihood and parent probabilities.

The log-likelihood omits the Gutenberg-Richter terms log f(m_i): they do
not depend on (mu, K, alpha, c, p).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import _kernels
from .core import (
    PARAM_NAMES,
    Catalog,
    EtasParams,
    FixedParamMask,
    from_unconstrained,
    omori_density,
    omori_integral,
    to_unconstrained,
)


class LikelihoodError(ArithmeticError):
    pass


def _weights(catalog: Catalog, params: EtasParams) -> np.ndarray:
    return params.k * np.exp(params.alpha * (catalog.mags - catalog.m0))


def log_likelihood(catalog: Catalog, params: EtasParams) -> float:
    """log p(x | theta) up to the magnitude-density constant."""
    vals = (params.mu, params.k, params.alpha, params.c, params.p)
    if any(math.isnan(v) for v in vals):
        raise LikelihoodError("NaN parameter")
    T = catalog.window_end
    if catalog.n == 0:
        return -params.mu * T
    w = _weights(catalog, params)
    log_terms = _kernels.log_intensity_sum(catalog.times, w, params.mu, params.c, params.p)
    if not np.isfinite(log_terms):
        raise LikelihoodError("nonpositive conditional intensity")
    tail = omori_integral(T - catalog.times, params.c, params.p)
    return float(log_terms - params.mu * T - np.sum(w * tail))


def compensator(catalog: Catalog, params: EtasParams, grid) -> np.ndarray:
    """Integrated intensity mu t + sum_{t_i < t} k(m_i) H(t - t_i) on ``grid``."""
    grid = np.ascontiguousarray(grid, dtype=float)
    if grid.size and np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted")
    w = _weights(catalog, params)
    return _kernels.compensator_on_grid(catalog.times, w, params.mu, params.c, params.p, grid)


def rescaled_times(catalog: Catalog, params: EtasParams) -> np.ndarray:
    """Compensator at each event time (time-rescaling residuals)."""
    return compensator(catalog, params, catalog.times)


# ---------------------------------------------------------------------------
# maximum likelihood


@dataclass
class MleResult:
    params: EtasParams
    log_likelihood: float
    converged: bool
    n_evaluations: int
    # best log-likelihood after each simplex iteration
    trace: list[float] = field(default_factory=list)


def mle(
    catalog: Catalog,
    init: EtasParams,
    mask: FixedParamMask | None = None,
    xatol: float = 1e-6,
    max_evaluations: int = 20_000,
) -> MleResult:
    """Nelder-Mead maximization of the log-likelihood in log coordinates."""
    if catalog.n == 0:
        raise ValueError("MLE needs a nonempty catalog")
    mask = mask or FixedParamMask()
    beta = init.beta
    names = mask.free_names
    x0 = to_unconstrained(mask.reduce(init.as_array()), beta, False, names)[0]

    trace: list[float] = []
    best = [np.inf]

    def negll(u):
        val = _negll(u)
        best[0] = min(best[0], val)
        return val

    def _negll(u):
        full = mask.expand(from_unconstrained(u, beta, False, names), beta)[0]
        if not np.all(np.isfinite(full)):
            return np.inf
        try:
            val = log_likelihood(catalog, EtasParams.from_array(full, beta))
        except (LikelihoodError, ValueError):
            return np.inf
        return -val if np.isfinite(val) else np.inf

    def callback(xk):
        trace.append(-best[0])

    res = optimize.minimize(
        negll,
        x0,
        method="Nelder-Mead",
        callback=callback,
        options={
            "xatol": xatol,
            "fatol": np.inf,
            "maxfev": max_evaluations,
            "maxiter": max_evaluations,
            "adaptive": len(names) > 3,
        },
    )
    full = mask.expand(from_unconstrained(res.x, beta, False, names), beta)[0]
    return MleResult(
        EtasParams.from_array(full, beta),
        float(-res.fun),
        bool(res.success),
        int(res.nfev),
        trace,
    )


# ---------------------------------------------------------------------------
# branching structure


@dataclass(frozen=True)
class BranchingProbabilities:
    """Sparse row-stochastic parent distribution.

    Row i (0-based event index) has entries over parents in
    ``indices[indptr[i]:indptr[i+1]]`` with 0 = background and j = event j
    (1-based), probabilities in ``probs`` at the same positions.
    """

    indptr: np.ndarray
    indices: np.ndarray
    probs: np.ndarray

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        sl = slice(self.indptr[i], self.indptr[i + 1])
        return self.indices[sl], self.probs[sl]

    def dense_row(self, i: int) -> np.ndarray:
        out = np.zeros(i + 1)
        idx, pr = self.row(i)
        out[idx] = pr
        return out

    @property
    def n(self) -> int:
        return self.indptr.size - 1


def branching_probabilities(catalog: Catalog, params: EtasParams, tol: float = 1e-15) -> BranchingProbabilities:
    w = _weights(catalog, params)
    indptr = [0]
    indices = []
    probs = []
    for i in range(catalog.n):
        row = _kernels.parent_mass_rows(catalog.times, w, params.mu, params.c, params.p, i)
        total = row.sum()
        keep = np.flatnonzero(row > tol * total)
        pr = row[keep] / row[keep].sum()
        indices.append(keep)
        probs.append(pr)
        indptr.append(indptr[-1] + keep.size)
    if catalog.n == 0:
        return BranchingProbabilities(np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    return BranchingProbabilities(
        np.asarray(indptr, dtype=np.int64), np.concatenate(indices), np.concatenate(probs)
    )


def sample_branching(
    catalog: Catalog, params: EtasParams, rng: np.random.Generator, method: str = "binned"
) -> np.ndarray:
    """One draw of the latent parent of every event (1-based, 0 = background).

    ``binned`` is an exact rejection sampler with sub-quadratic cost;
    ``scan`` evaluates every candidate parent (quadratic, kept as a check).
    """
    if catalog.n == 0:
        return np.zeros(0, dtype=np.int64)
    w = _weights(catalog, params)
    if method == "binned":
        seed = int(rng.integers(2**31 - 1))
        return _kernels.draw_branching_binned(catalog.times, w, params.mu, params.c, params.p, seed)
    if method == "scan":
        u = rng.random(catalog.n)
        return _kernels.draw_branching(catalog.times, w, params.mu, params.c, params.p, u, 1e-12)
    raise ValueError(f"unknown branching sampler {method!r}")


def conditional_log_likelihood(catalog: Catalog, params: EtasParams, parents: np.ndarray) -> float:
    """Complete-data log-likelihood given the branching structure."""
    parents = np.asarray(parents)
    T = catalog.window_end
    n_bg = int(np.sum(parents == 0))
    w = _weights(catalog, params)
    off = parents > 0
    n_children = np.bincount(parents[off] - 1, minlength=catalog.n)
    out = -params.mu * T - float(np.sum(w * omori_integral(T - catalog.times, params.c, params.p)))
    if n_bg:
        out += n_bg * math.log(params.mu)
    if off.any():
        out += float(np.sum(n_children[n_children > 0] * np.log(w[n_children > 0])))
        lag = catalog.times[off] - catalog.times[parents[off] - 1]
        out += float(np.sum(np.log(omori_density(lag, params.c, params.p))))
    return out


__all__ = [
    "BranchingProbabilities",
    "LikelihoodError",
    "MleResult",
    "PARAM_NAMES",
    "branching_probabilities",
    "compensator",
    "conditional_log_likelihood",
    "log_likelihood",
    "mle",
    "rescaled_times",
    "sample_branching",
]
