"""Temporal ETAS model primitives.

Catalog and parameter containers, the Omori-Utsu and Utsu productivity
kernels, the Gutenberg-Richter magnitude law, priors and the
unconstrained parameter transform shared by every sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, Union

import numpy as np
from scipy import special, stats

PARAM_NAMES = ("mu", "k", "alpha", "c", "p")


class EtasDomainError(ValueError):
    """Raised when a kernel or parameter set is outside its valid domain."""


class CriticalityError(EtasDomainError):
    """Raised when the expected offspring count is infinite (alpha >= beta)."""


class PriorExhaustedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class Catalog:
    """Time-ordered event sequence on the window [0, T)."""

    times: np.ndarray
    mags: np.ndarray
    window_end: float
    m0: float

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=float)
        mags = np.ascontiguousarray(self.mags, dtype=float)
        if times.ndim != 1 or times.shape != mags.shape:
            raise ValueError("times and mags must be 1-d arrays of equal length")
        if not self.window_end > 0:
            raise ValueError(f"window_end must be positive, got {self.window_end}")
        if times.size:
            if np.any(np.diff(times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if times[0] < 0 or times[-1] > self.window_end:
                raise ValueError("event times must lie in [0, T]")
            if np.any(mags < self.m0):
                raise ValueError("magnitudes must be >= m0")
        times.setflags(write=False)
        mags.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "mags", mags)
        object.__setattr__(self, "window_end", float(self.window_end))
        object.__setattr__(self, "m0", float(self.m0))

    def __len__(self) -> int:
        return self.times.size

    @property
    def n(self) -> int:
        return self.times.size

    @classmethod
    def empty(cls, window_end: float, m0: float) -> "Catalog":
        return cls(np.empty(0), np.empty(0), window_end, m0)

    def beta_mle(self) -> float:
        """Closed-form Gutenberg-Richter rate n / sum(m - M0)."""
        excess = float(np.sum(self.mags - self.m0))
        if self.n == 0 or excess <= 0:
            raise EtasDomainError("beta MLE needs at least one event above m0")
        return self.n / excess


@dataclass(frozen=True)
class EtasParams:
    mu: float
    k: float
    alpha: float
    c: float
    p: float
    beta: float

    def __post_init__(self):
        if not self.mu >= 0:
            raise EtasDomainError(f"mu must be nonnegative, got {self.mu}")
        if not self.k >= 0:
            raise EtasDomainError(f"K must be nonnegative, got {self.k}")
        if not self.alpha >= 0:
            raise EtasDomainError(f"alpha must be nonnegative, got {self.alpha}")
        if not self.c > 0:
            raise EtasDomainError(f"c must be positive, got {self.c}")
        if not self.p > 1:
            raise EtasDomainError(f"p must exceed 1, got {self.p}")
        if not self.beta > 0:
            raise EtasDomainError(f"beta must be positive, got {self.beta}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.k, self.alpha, self.c, self.p])

    @classmethod
    def from_array(cls, x: Sequence[float], beta: float) -> "EtasParams":
        mu, k, alpha, c, p = (float(v) for v in x)
        return cls(mu, k, alpha, c, p, float(beta))

    def with_(self, **kw) -> "EtasParams":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# kernels


def _check_omori(c, p):
    if np.any(np.asarray(c) <= 0):
        raise EtasDomainError("Omori c must be positive")
    if np.any(np.asarray(p) <= 1):
        raise EtasDomainError("Omori p must exceed 1")


def omori_density(t, c, p):
    """Normalized Omori-Utsu decay c^(p-1) (p-1) (t+c)^-p on t >= 0."""
    _check_omori(c, p)
    t = np.asarray(t, dtype=float)
    out = (p - 1.0) / c * (1.0 + t / c) ** (-p)
    return out if out.ndim else float(out)


def omori_integral(t, c, p):
    """Integral of the Omori density from 0 to t: 1 - (c/(t+c))^(p-1)."""
    _check_omori(c, p)
    t = np.asarray(t, dtype=float)
    # -expm1 keeps precision for small t
    out = -np.expm1((1.0 - p) * np.log1p(t / c))
    if np.ndim(out) == 0:
        out = float(out)
        return 1.0 if math.isinf(t) else out
    return np.where(np.isinf(t), 1.0, out)


def omori_sample(rng: np.random.Generator, c, p, size=None):
    """Draw delays by inverting the Omori CDF."""
    u = rng.random(size)
    # heavy tails overflow to inf, which callers treat as beyond the window
    with np.errstate(over="ignore", invalid="ignore"):
        return c * (u ** (1.0 / (1.0 - p)) - 1.0)


def productivity(m, k, alpha, m0):
    """Utsu productivity K exp(alpha (m - M0))."""
    m = np.asarray(m, dtype=float)
    if np.any(m < m0):
        raise EtasDomainError("productivity undefined below m0")
    out = k * np.exp(alpha * (m - m0))
    return out if out.ndim else float(out)


def sample_magnitude(rng: np.random.Generator, beta: float, m0: float, size=None):
    return m0 + rng.exponential(1.0 / beta, size)


def branching_ratio(params: EtasParams) -> float:
    """Expected number of direct offspring per event, K beta / (beta - alpha)."""
    if params.alpha >= params.beta:
        raise CriticalityError(
            f"alpha={params.alpha} >= beta={params.beta}: infinite expected offspring"
        )
    return params.k * params.beta / (params.beta - params.alpha)


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("Uniform needs hi > lo")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        return np.where(inside, -math.log(self.hi - self.lo), -np.inf)

    def sample(self, rng, size=None):
        return rng.uniform(self.lo, self.hi, size)

    def cdf(self, x):
        return np.clip((np.asarray(x, float) - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def ppf(self, q):
        return self.lo + np.asarray(q, float) * (self.hi - self.lo)


@dataclass(frozen=True)
class Gamma:
    """Gamma(shape, rate)."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError("Gamma needs positive shape and rate")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = stats.gamma.logpdf(x, self.shape, scale=1.0 / self.rate)
        return np.where(x > 0, out, -np.inf)

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def cdf(self, x):
        return stats.gamma.cdf(x, self.shape, scale=1.0 / self.rate)

    def ppf(self, q):
        return stats.gamma.ppf(q, self.shape, scale=1.0 / self.rate)


@dataclass(frozen=True)
class LogNormal:
    meanlog: float
    sdlog: float

    def __post_init__(self):
        if not self.sdlog > 0:
            raise ValueError("LogNormal needs sdlog > 0")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = stats.lognorm.logpdf(x, self.sdlog, scale=math.exp(self.meanlog))
        return np.where(x > 0, out, -np.inf)

    def sample(self, rng, size=None):
        return rng.lognormal(self.meanlog, self.sdlog, size)

    def cdf(self, x):
        return stats.lognorm.cdf(x, self.sdlog, scale=math.exp(self.meanlog))

    def ppf(self, q):
        return stats.lognorm.ppf(q, self.sdlog, scale=math.exp(self.meanlog))


Marginal = Union[Uniform, Gamma, LogNormal]


def parse_marginal(text: str) -> Marginal:
    """Parse ``uniform(0, 10)``, ``gamma(0.1, 0.1)`` or ``lognormal(-1, 2.03)``."""
    name, _, rest = text.strip().partition("(")
    if not rest.endswith(")"):
        raise ValueError(f"cannot parse prior {text!r}")
    args = [float(a) for a in rest[:-1].split(",")]
    kinds = {"uniform": Uniform, "gamma": Gamma, "lognormal": LogNormal}
    try:
        return kinds[name.strip().lower()](*args)
    except KeyError:
        raise ValueError(f"unknown prior family {name!r}") from None


def format_marginal(m: Marginal) -> str:
    if isinstance(m, Uniform):
        return f"uniform({m.lo!r}, {m.hi!r})"
    if isinstance(m, Gamma):
        return f"gamma({m.shape!r}, {m.rate!r})"
    return f"lognormal({m.meanlog!r}, {m.sdlog!r})"


@dataclass(frozen=True)
class PriorSpec:
    mu: Marginal
    k: Marginal
    alpha: Marginal
    c: Marginal
    p: Marginal
    subcritical: bool = True

    def marginal(self, name: str) -> Marginal:
        return getattr(self, name)

    def logpdf_array(self, x, beta: float) -> np.ndarray:
        """Joint log-density of rows ``(mu, K, alpha, c, p)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for j, name in enumerate(PARAM_NAMES):
            out += self.marginal(name).logpdf(x[:, j])
        if self.subcritical:
            ok = x[:, 1] * beta < beta - x[:, 2]
            out = np.where(ok, out, -np.inf)
        return np.where(np.isnan(out), -np.inf, out)

    def sample_array(self, rng, n: int, beta: float, max_attempts: int = 10**6) -> np.ndarray:
        out = np.empty((0, 5))
        attempts = 0
        while out.shape[0] < n:
            m = max(2 * (n - out.shape[0]), 16)
            draw = np.column_stack([self.marginal(nm).sample(rng, m) for nm in PARAM_NAMES])
            attempts += m
            if self.subcritical:
                draw = draw[draw[:, 1] * beta < beta - draw[:, 2]]
            out = np.vstack([out, draw])
            if out.shape[0] < n and attempts >= max_attempts * max(n, 1):
                raise PriorExhaustedError(
                    "subcritical region has negligible prior mass"
                )
        return out[:n]


def prior_logpdf(prior: PriorSpec, theta: EtasParams) -> float:
    return float(prior.logpdf_array(theta.as_array(), theta.beta)[0])


def prior_sample(prior: PriorSpec, rng, beta: float) -> EtasParams:
    return EtasParams.from_array(prior.sample_array(rng, 1, beta)[0], beta)


def synthetic_prior() -> PriorSpec:
    """Uniform background prior with the subcritical constraint."""
    return PriorSpec(
        mu=Uniform(0.05, 0.3),
        k=Uniform(0.0, 10.0),
        alpha=Uniform(0.0, 10.0),
        c=Uniform(0.0, 10.0),
        p=Uniform(1.0, 10.0),
        subcritical=True,
    )


def reference_mcmc_prior() -> PriorSpec:
    """Gamma background prior with flat kernels, no constraint."""
    return PriorSpec(
        mu=Gamma(0.1, 0.1),
        k=Uniform(0.0, 10.0),
        alpha=Uniform(0.0, 10.0),
        c=Uniform(0.0, 10.0),
        p=Uniform(1.0, 10.0),
        subcritical=False,
    )


# ---------------------------------------------------------------------------
# fixed parameters and transforms


@dataclass(frozen=True)
class FixedParamMask:
    """Pinned parameters; ``alpha="beta"`` ties alpha to the magnitude rate."""

    fixed: Mapping[str, Union[float, str]] = field(default_factory=dict)

    def __post_init__(self):
        for name, val in self.fixed.items():
            if name not in PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            if isinstance(val, str) and not (name == "alpha" and val == "beta"):
                raise ValueError(f"only alpha may be tied to beta, got {name}={val!r}")
        object.__setattr__(self, "fixed", dict(self.fixed))

    @property
    def free_names(self) -> tuple[str, ...]:
        return tuple(n for n in PARAM_NAMES if n not in self.fixed)

    @property
    def free_index(self) -> np.ndarray:
        return np.array([PARAM_NAMES.index(n) for n in self.free_names], dtype=int)

    def pinned_value(self, name: str, beta: float) -> float:
        v = self.fixed[name]
        return float(beta) if isinstance(v, str) else float(v)

    def expand(self, free, beta: float) -> np.ndarray:
        free = np.atleast_2d(np.asarray(free, dtype=float))
        full = np.empty((free.shape[0], 5))
        full[:, self.free_index] = free
        for name in self.fixed:
            full[:, PARAM_NAMES.index(name)] = self.pinned_value(name, beta)
        return full

    def reduce(self, full) -> np.ndarray:
        full = np.atleast_2d(np.asarray(full, dtype=float))
        return full[:, self.free_index]

    def check_prior(self, prior: "PriorSpec") -> None:
        # alpha = beta makes K*beta/(beta - alpha) infinite, so nothing is subcritical
        if self.fixed.get("alpha") == "beta" and prior.subcritical:
            raise ValueError("alpha tied to beta needs a prior with subcritical=False")


def _logit(x):
    return np.log(x) - np.log1p(-x)


def to_unconstrained(x, beta: float, subcritical: bool, names=PARAM_NAMES) -> np.ndarray:
    """Map natural parameters to R^d.

    log for mu, K, c and p - 1; alpha goes through logit(alpha / beta) when
    the subcritical wedge is enforced and through log otherwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.empty_like(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        for j, name in enumerate(names):
            col = x[:, j]
            if name == "p":
                u[:, j] = np.log(col - 1.0)
            elif name == "alpha" and subcritical:
                u[:, j] = _logit(col / beta)
            else:
                u[:, j] = np.log(col)
    return u


def from_unconstrained(u, beta: float, subcritical: bool, names=PARAM_NAMES) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    x = np.empty_like(u)
    for j, name in enumerate(names):
        col = u[:, j]
        if name == "p":
            x[:, j] = 1.0 + np.exp(col)
        elif name == "alpha" and subcritical:
            x[:, j] = beta * special.expit(col)
        else:
            x[:, j] = np.exp(col)
    return x


def log_abs_det_jacobian(u, beta: float, subcritical: bool, names=PARAM_NAMES) -> np.ndarray:
    """log |d natural / d unconstrained|, summed over coordinates."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    out = np.zeros(u.shape[0])
    for j, name in enumerate(names):
        col = u[:, j]
        if name == "alpha" and subcritical:
            # d/du beta*sigmoid(u) = beta * s * (1 - s)
            out += math.log(beta) - np.logaddexp(0.0, col) - np.logaddexp(0.0, -col)
        else:
            out += col
    return out


@dataclass
class PosteriorSamples:
    """Parameter draws (rows) in natural units with provenance."""

    samples: np.ndarray
    names: tuple[str, ...]
    method: str
    seed: int | None = None
    round: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.names = tuple(self.names)
        if self.samples.shape[1] != len(self.names):
            raise ValueError("column count does not match names")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]

    def interval(self, level: float = 0.95) -> np.ndarray:
        """Equal-tailed marginal intervals, one (lo, hi) row per parameter."""
        a = (1.0 - level) / 2.0
        return np.quantile(self.samples, [a, 1.0 - a], axis=0).T
