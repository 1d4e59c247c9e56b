"""Simulator tasks: prior, parameter transform, simulate-and-summarize.

The inference engine only talks to this interface, so the ETAS model and
the small test simulators (a conjugate Gaussian and an exponential-kernel
Hawkes process) run through identical code paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import (
    Catalog,
    FixedParamMask,
    PriorExhaustedError,
    PriorSpec,
    from_unconstrained,
    log_abs_det_jacobian,
    to_unconstrained,
)
from .core import EtasParams
from .simulate import SimConfig, simulate_branching
from .summaries import SummaryConfig, interevent_stats, ripley_k, summarize


class Task:
    """Base class; subclasses fill in the prior, transform and simulator."""

    names: tuple[str, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.names)

    def sample_prior(self, rng, n: int) -> np.ndarray:
        raise NotImplementedError

    def log_prior(self, theta) -> np.ndarray:
        raise NotImplementedError

    def to_u(self, theta) -> np.ndarray:
        raise NotImplementedError

    def from_u(self, u) -> np.ndarray:
        raise NotImplementedError

    def log_jacobian(self, u) -> np.ndarray:
        """log |d theta / d u|."""
        raise NotImplementedError

    def simulate(self, theta, rng) -> np.ndarray | None:
        """Summary vector of one simulation, or None if the run failed."""
        raise NotImplementedError

    def features(self, s) -> np.ndarray:
        """Network inputs derived from summaries (identity by default)."""
        return np.atleast_2d(np.asarray(s, dtype=float))

    def sample_prior_truncated(self, rng, n: int, lo_u, hi_u, max_attempts: int = 10**7) -> np.ndarray:
        """Prior draws restricted to the box [lo_u, hi_u] in transformed space.

        The generic version rejects whole-prior draws; subclasses with
        independent marginals override it with inverse-CDF sampling, which
        draws from the same distribution without the rejection cost.
        """
        out, drawn = [], 0
        need = n
        while need > 0:
            if drawn >= max_attempts:
                raise PriorExhaustedError(f"truncated prior: {n - need} of {n} draws after {drawn} attempts")
            batch = max(2 * need, 256)
            x = self.sample_prior(rng, batch)
            drawn += batch
            u = self.to_u(x)
            keep = x[np.all((u >= lo_u) & (u <= hi_u), axis=1)][:need]
            out.append(keep)
            need -= keep.shape[0]
        return np.vstack(out)

    def log_prior_u(self, u) -> np.ndarray:
        u = np.atleast_2d(u)
        with np.errstate(invalid="ignore", over="ignore"):
            out = self.log_prior(self.from_u(u)) + self.log_jacobian(u)
        return np.where(np.isnan(out), -np.inf, out)

    def describe(self) -> dict:
        return {"task": type(self).__name__, "names": list(self.names)}


@dataclass
class EtasTask(Task):
    prior: PriorSpec
    beta: float
    sim: SimConfig
    summary: SummaryConfig = field(default_factory=SummaryConfig)
    mask: FixedParamMask = field(default_factory=FixedParamMask)

    def __post_init__(self):
        self.mask.check_prior(self.prior)
        self.names = self.mask.free_names

    def full(self, theta) -> np.ndarray:
        return self.mask.expand(theta, self.beta)

    def sample_prior(self, rng, n):
        return self.mask.reduce(self.prior.sample_array(rng, n, self.beta))

    def log_prior(self, theta):
        return self.prior.logpdf_array(self.full(theta), self.beta)

    def to_u(self, theta):
        return to_unconstrained(theta, self.beta, self.prior.subcritical, self.names)

    def from_u(self, u):
        return from_unconstrained(u, self.beta, self.prior.subcritical, self.names)

    def log_jacobian(self, u):
        return log_abs_det_jacobian(u, self.beta, self.prior.subcritical, self.names)

    def features(self, s):
        # log1p tames the heavy right tails of the pair-count statistics
        s = np.atleast_2d(np.asarray(s, dtype=float)).copy()
        s[:, 1:] = np.log1p(np.maximum(s[:, 1:], 0.0))
        return s

    def sample_prior_truncated(self, rng, n, lo_u, hi_u, max_attempts=10**7):
        lo_x = self.from_u(np.asarray(lo_u, dtype=float))[0]
        hi_x = self.from_u(np.asarray(hi_u, dtype=float))[0]
        margs = [self.prior.marginal(name) for name in self.names]
        cdf_lo = np.array([float(m.cdf(a)) for m, a in zip(margs, lo_x)])
        cdf_hi = np.array([float(m.cdf(b)) for m, b in zip(margs, hi_x)])
        if np.any(cdf_hi <= cdf_lo):
            raise PriorExhaustedError("truncation box has zero prior mass")
        out, drawn, need = [], 0, n
        while need > 0:
            if drawn >= max_attempts:
                raise PriorExhaustedError(f"truncated prior: {n - need} of {n} draws after {drawn} attempts")
            batch = max(2 * need, 256)
            q = cdf_lo + rng.random((batch, self.dim)) * (cdf_hi - cdf_lo)
            x = np.column_stack([m.ppf(q[:, j]) for j, m in enumerate(margs)])
            x = np.clip(x, lo_x, hi_x)
            drawn += batch
            # joint constraints (subcriticality) by rejection
            keep = x[np.isfinite(self.log_prior(x))][:need]
            out.append(keep)
            need -= keep.shape[0]
        return np.vstack(out)

    def params(self, theta) -> EtasParams:
        return EtasParams.from_array(self.full(theta)[0], self.beta)

    def simulate_catalog(self, theta, rng):
        return simulate_branching(self.params(theta), self.sim, rng)

    def simulate(self, theta, rng):
        res = self.simulate_catalog(theta, rng)
        if res.truncated:
            return None
        return summarize(res.catalog, self.summary).values

    def observe(self, catalog: Catalog) -> np.ndarray:
        return summarize(catalog, self.summary).values

    def describe(self):
        return {
            "task": "etas",
            "names": list(self.names),
            "beta": self.beta,
            "window_end": self.sim.window_end,
            "summary_fingerprint": self.summary.fingerprint(),
        }


class BoxTask(Task):
    """Task with an independent uniform prior on a box; logit transform per axis."""

    def __init__(self, lo, hi, names):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.names = tuple(names)

    def sample_prior(self, rng, n):
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def log_prior(self, theta):
        theta = np.atleast_2d(theta)
        inside = np.all((theta > self.lo) & (theta < self.hi), axis=1)
        return np.where(inside, -np.log(self.hi - self.lo).sum(), -np.inf)

    def to_u(self, theta):
        x = (np.atleast_2d(theta) - self.lo) / (self.hi - self.lo)
        with np.errstate(divide="ignore"):
            return special.logit(x)

    def from_u(self, u):
        return self.lo + (self.hi - self.lo) * special.expit(np.atleast_2d(u))

    def log_jacobian(self, u):
        u = np.atleast_2d(u)
        return (np.log(self.hi - self.lo) - np.logaddexp(0, u) - np.logaddexp(0, -u)).sum(axis=1)

    def sample_prior_truncated(self, rng, n, lo_u, hi_u, max_attempts=None):
        a = self.from_u(np.asarray(lo_u, dtype=float))[0]
        b = self.from_u(np.asarray(hi_u, dtype=float))[0]
        return rng.uniform(a, b, size=(n, self.dim))


class GaussianToyTask(Task):
    """theta ~ N(0, prior_sd^2), s = theta + N(0, noise_sd^2); conjugate posterior."""

    def __init__(self, prior_sd=1.0, noise_sd=1.0, dim=1):
        self.prior_sd = float(prior_sd)
        self.noise_sd = float(noise_sd)
        self.names = tuple(f"theta{i}" for i in range(dim))

    def sample_prior(self, rng, n):
        return rng.normal(0.0, self.prior_sd, size=(n, self.dim))

    def log_prior(self, theta):
        theta = np.atleast_2d(theta)
        return (-0.5 * (theta / self.prior_sd) ** 2 - math.log(self.prior_sd) - 0.5 * math.log(2 * math.pi)).sum(1)

    def to_u(self, theta):
        return np.atleast_2d(np.asarray(theta, dtype=float)).copy()

    def from_u(self, u):
        return np.atleast_2d(np.asarray(u, dtype=float)).copy()

    def log_jacobian(self, u):
        return np.zeros(np.atleast_2d(u).shape[0])

    def simulate(self, theta, rng):
        theta = np.asarray(theta, dtype=float).ravel()
        return theta + rng.normal(0.0, self.noise_sd, size=theta.size)

    def posterior(self, s):
        """Exact posterior mean and variance per coordinate."""
        v0, vn = self.prior_sd**2, self.noise_sd**2
        var = 1.0 / (1.0 / v0 + 1.0 / vn)
        return var * np.asarray(s) / vn, var

    def sample_prior_truncated(self, rng, n, lo_u, hi_u, max_attempts=None):
        sd = self.prior_sd
        a = special.ndtr(np.asarray(lo_u, dtype=float) / sd)
        b = special.ndtr(np.asarray(hi_u, dtype=float) / sd)
        return sd * special.ndtri(a + rng.random((n, self.dim)) * (b - a))


class ExpHawkesTask(BoxTask):
    """Univariate Hawkes process with exponential kernel eta * omega * exp(-omega t).

    Parameters (mu, eta, omega): background rate, branching ratio, decay
    rate.  Summaries are the unmarked part of the ETAS summary vector.
    """

    def __init__(self, window_end=1000.0, lo=(0.05, 0.0, 0.0), hi=(0.85, 0.9, 3.0), windows=None, max_events=10**6):
        super().__init__(lo, hi, ("mu", "eta", "omega"))
        self.window_end = float(window_end)
        self.windows = SummaryConfig().windows if windows is None else tuple(windows)
        self.max_events = max_events

    def simulate_times(self, theta, rng) -> np.ndarray | None:
        mu, eta, omega = np.asarray(theta, dtype=float).ravel()
        T = self.window_end
        gen = rng.uniform(0.0, T, rng.poisson(mu * T))
        out = [gen]
        total = gen.size
        while gen.size and eta > 0:
            counts = rng.poisson(eta, gen.size)
            child = np.repeat(gen, counts) + rng.exponential(1.0 / omega, counts.sum())
            gen = child[child < T]
            total += gen.size
            if total > self.max_events:
                return None
            out.append(gen)
        return np.sort(np.concatenate(out))

    def features(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=float)).copy()
        s[:, 1:] = np.log1p(np.maximum(s[:, 1:], 0.0))
        return s

    def simulate(self, theta, rng):
        t = self.simulate_times(theta, rng)
        if t is None:
            return None
        t = t[np.concatenate([[True], np.diff(t) > 0])] if t.size else t
        cat = Catalog(t, np.zeros(t.size), self.window_end, 0.0)
        return np.concatenate(
            [[math.log1p(cat.n)], interevent_stats(cat), ripley_k(cat, self.windows)]
        )

    def log_likelihood(self, theta, times) -> float:
        """Exact log-likelihood by the exponential-kernel recursion."""
        mu, eta, omega = theta
        T = self.window_end
        a = 0.0
        ll = 0.0
        prev = 0.0
        for t in times:
            a = math.exp(-omega * (t - prev)) * a
            ll += math.log(mu + eta * omega * a)
            a += 1.0
            prev = t
        comp = mu * T + eta * np.sum(-np.expm1(-omega * (T - np.asarray(times))))
        return ll - comp
