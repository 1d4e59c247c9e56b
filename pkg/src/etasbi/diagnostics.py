"""Sample-set comparison (MMD, C2ST), coverage calibration and compensator bands."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.special import expit

from .core import EtasParams, FixedParamMask, PosteriorSamples
from .likelihood import compensator
from .nde import Mlp, sgd_momentum
from .parallel import task_rng

log = logging.getLogger(__name__)

DEFAULT_LEVELS = tuple(round(0.05 * i, 2) for i in range(1, 20))


class DegenerateSampleError(ValueError):
    pass


class ImbalanceError(ValueError):
    pass


@dataclass
class SampleSet:
    draws: np.ndarray
    method: str = ""
    seed: int | None = None
    round: int | None = None

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("sample set has non-finite entries")

    @classmethod
    def from_posterior(cls, ps: PosteriorSamples) -> "SampleSet":
        return cls(ps.samples, ps.method, ps.seed, ps.round)


def _matrix(x) -> np.ndarray:
    if isinstance(x, SampleSet):
        return x.draws
    if isinstance(x, PosteriorSamples):
        return x.samples
    arr = np.asarray(x, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def joint_standardize(a, b):
    """Standardize both sets with the pooled mean and SD."""
    pooled = np.vstack([a, b])
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (a - mean) / sd, (b - mean) / sd


# MMD ------------------------------------------------------------------------


@dataclass(frozen=True)
class MmdResult:
    value: float
    raw: float
    bandwidth: float

    def __float__(self) -> float:
        return self.value


def _sq_dists(x, y):
    return np.maximum((x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T, 0.0)


def median_distance(x, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance, on a fixed subsample when large."""
    if x.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(x.shape[0], max_points, replace=False)
        x = x[np.sort(idx)]
    d = _sq_dists(x, x)[np.triu_indices(x.shape[0], 1)]
    return float(np.sqrt(np.median(d)))


def _kernel_sum(x, y, gamma, block=1024):
    total = 0.0
    for i in range(0, x.shape[0], block):
        total += np.exp(-gamma * _sq_dists(x[i : i + block], y)).sum()
    return total


def mmd(a, b, bandwidth: float | None = None, max_median_points: int = 2000) -> MmdResult:
    """Unbiased squared MMD with a Gaussian kernel.

    Both sets are standardized with pooled moments first, so the estimate
    is invariant to a common affine map.  ``value`` is clamped at zero,
    ``raw`` keeps the signed U-statistic.
    """
    a, b = _matrix(a), _matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ValueError("need at least two draws per set")
    a, b = joint_standardize(a, b)
    h = median_distance(np.vstack([a, b]), max_median_points) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DegenerateSampleError("median pairwise distance is zero")
    gamma = 1.0 / (2.0 * h * h)
    kaa = (_kernel_sum(a, a, gamma) - m) / (m * (m - 1))
    kbb = (_kernel_sum(b, b, gamma) - n) / (n * (n - 1))
    kab = _kernel_sum(a, b, gamma) / (m * n)
    raw = kaa + kbb - 2.0 * kab
    return MmdResult(max(raw, 0.0), raw, h)


# C2ST -----------------------------------------------------------------------


@dataclass(frozen=True)
class C2stConfig:
    hidden: int = 32
    folds: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0


def _fit_classifier(x, y, config: C2stConfig, rng):
    net = Mlp((x.shape[1], config.hidden, 1))
    flat = net.init(rng, out_scale=1.0)
    perm = rng.permutation(x.shape[0])
    n_val = max(1, x.shape[0] // 10)
    va, tr = perm[:n_val], perm[n_val:]

    def bce(flat, xs, ys, grad=True):
        out, acts = net.forward(flat, xs)
        z = out[:, 0]
        # log(1 + e^z) - y z
        loss = float(np.mean(np.logaddexp(0.0, z) - ys * z))
        if not grad:
            return loss, None
        d = ((expit(z) - ys) / xs.shape[0])[:, None]
        return loss, net.backward(flat, acts, d)

    def batch(flat, idx):
        return bce(flat, x[tr[idx]], y[tr[idx]])

    def val(flat):
        return bce(flat, x[va], y[va], grad=False)[0]

    flat, *_ = sgd_momentum(
        batch, flat, tr.size, config.batch_size, config.learning_rate, config.momentum,
        config.max_epochs, config.patience, rng, val,
    )
    return lambda xs: net.forward(flat, xs)[0][:, 0] > 0.0


def c2st(a, b, config: C2stConfig = C2stConfig()) -> float:
    """Mean held-out accuracy of a small classifier separating a (0) from b (1)."""
    a, b = _matrix(a), _matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    if min(a.shape[0], b.shape[0]) < 100:
        raise ValueError("c2st needs at least 100 draws per set")
    ratio = a.shape[0] / b.shape[0]
    if not 0.5 <= ratio <= 2.0:
        raise ImbalanceError(f"set sizes {a.shape[0]} and {b.shape[0]}: subsample to balance first")
    a, b = joint_standardize(a, b)
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(a.shape[0]), np.ones(b.shape[0])])
    rng = np.random.default_rng(config.seed)
    folds = np.array_split(rng.permutation(x.shape[0]), config.folds)
    acc = []
    for k, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != k])
        predict = _fit_classifier(x[train], y[train], config, np.random.default_rng([config.seed, k]))
        acc.append(float(np.mean(predict(x[test]) == (y[test] > 0.5))))
    return float(np.mean(acc))


# coverage -------------------------------------------------------------------

COVERAGE_MODES = ("joint", "product", "marginal")


def _ranks_of(samples, point):
    """Mid-rank of each coordinate of ``point`` within ``samples``, in [0, 1]."""
    below = (samples < point).sum(axis=0)
    ties = (samples == point).sum(axis=0)
    return (below + 0.5 * ties) / samples.shape[0]


def covered(samples, truth, levels, mode: str = "joint") -> np.ndarray:
    """Indicator(s) that ``truth`` lies in the level-gamma credible region.

    Regions are built from marginal ranks.  ``joint``: a sample's
    centrality is max_i |2 r_i - 1| and the region holds the gamma
    fraction of most central draws.  ``product``: each marginal rank lies
    in its central gamma^(1/d) band.  ``marginal``: one indicator per
    parameter with central gamma bands.
    """
    samples = _matrix(samples)
    truth = np.asarray(truth, dtype=float).ravel()
    levels = np.asarray(levels, dtype=float)
    d = samples.shape[1]
    r = _ranks_of(samples, truth)
    cent = np.abs(2.0 * r - 1.0)
    if mode == "marginal":
        return cent[None, :] <= levels[:, None]
    if mode == "product":
        return np.all(cent[None, :] <= levels[:, None] ** (1.0 / d), axis=1)
    if mode == "joint":
        n = samples.shape[0]
        ranks = (stats.rankdata(samples, axis=0) - 0.5) / n
        sc = np.abs(2.0 * ranks - 1.0).max(axis=1)
        thresh = np.quantile(sc, levels, method="inverted_cdf")
        return cent.max() <= thresh
    raise ValueError(f"mode must be one of {COVERAGE_MODES}")


@dataclass
class CoverageReport:
    levels: np.ndarray
    coverage: np.ndarray
    n_replicates: int
    mode: str
    marginal: np.ndarray | None = None
    names: tuple[str, ...] = ()
    n_failed: int = 0
    hits: np.ndarray | None = field(default=None, repr=False)

    def bounds(self, confidence: float = 0.99):
        """Two-sided binomial acceptance band for a calibrated method."""
        a = (1.0 - confidence) / 2.0
        n = self.n_replicates
        lo = stats.binom.ppf(a, n, self.levels) / n
        hi = stats.binom.ppf(1.0 - a, n, self.levels) / n
        return lo, hi

    def classify(self, confidence: float = 0.95) -> list[str]:
        lo, hi = self.bounds(confidence)
        out = []
        for c, l, h in zip(self.coverage, lo, hi):
            out.append("overconfident" if c < l else "conservative" if c > h else "calibrated")
        return out

    def to_csv(self) -> str:
        lo, hi = self.bounds(0.99)
        head = ["level", "coverage", "lo99", "hi99", "class"]
        if self.marginal is not None:
            head += [f"cov_{n}" for n in self.names]
        rows = [",".join(head)]
        for i, (g, c, cl) in enumerate(zip(self.levels, self.coverage, self.classify())):
            row = [f"{g:.2f}", f"{c:.4f}", f"{lo[i]:.4f}", f"{hi[i]:.4f}", cl]
            if self.marginal is not None:
                row += [f"{v:.4f}" for v in self.marginal[i]]
            rows.append(",".join(row))
        return "\n".join(rows) + "\n"


def coverage(
    runner: Callable,
    replicate: Callable,
    n_replicates: int,
    levels=DEFAULT_LEVELS,
    mode: str = "joint",
    seed: int = 0,
    names: tuple[str, ...] = (),
) -> CoverageReport:
    """Simulation-based calibration.

    ``replicate(rng)`` returns (theta_star, data) with theta_star drawn from
    the prior; ``runner(data, index)`` returns posterior draws.  Runner
    failures skip the replicate and are counted.
    """
    if mode not in COVERAGE_MODES:
        raise ValueError(f"mode must be one of {COVERAGE_MODES}")
    levels = np.asarray(sorted(levels), dtype=float)
    joint_hits, marg_hits = [], []
    failed = 0
    for i in range(n_replicates):
        truth, data = replicate(task_rng(seed, i))
        try:
            draws = _matrix(runner(data, i))
        except Exception as exc:  # noqa: BLE001 - any runner failure skips the replicate
            log.warning("replicate %d skipped: %s", i, exc)
            failed += 1
            continue
        if draws.shape[0] == 0:
            log.warning("replicate %d skipped: no posterior draws", i)
            failed += 1
            continue
        joint_hits.append(covered(draws, truth, levels, mode if mode != "marginal" else "joint"))
        marg_hits.append(covered(draws, truth, levels, "marginal"))
    n = len(joint_hits)
    if n == 0:
        raise RuntimeError("every coverage replicate failed")
    marg = np.mean(marg_hits, axis=0)
    cov = marg.mean(axis=1) if mode == "marginal" else np.mean(joint_hits, axis=0)
    return CoverageReport(levels, cov, n, mode, marg, tuple(names), failed, np.asarray(joint_hits))


def etas_replicates(task, max_tries: int = 100):
    """Replicate generator for an EtasTask: prior draw plus a complete catalog."""

    def replicate(rng):
        for _ in range(max_tries):
            theta = task.sample_prior(rng, 1)[0]
            res = task.simulate_catalog(theta, rng)
            if not res.truncated:
                return theta, res.catalog
        raise RuntimeError("could not simulate a complete catalog from the prior")

    return replicate


# compensator bands ----------------------------------------------------------


@dataclass
class CompensatorBand:
    grid: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    observed: np.ndarray

    def to_csv(self) -> str:
        rows = ["t,mean,lo95,hi95,observed"]
        for r in zip(self.grid, self.mean, self.lo, self.hi, self.observed):
            rows.append(f"{r[0]!r},{r[1]!r},{r[2]!r},{r[3]!r},{int(r[4])}")
        return "\n".join(rows) + "\n"


def compensator_check(
    catalog,
    samples,
    grid=None,
    beta: float | None = None,
    mask: FixedParamMask | None = None,
    names=None,
    max_draws: int | None = 1000,
    seed: int = 0,
) -> CompensatorBand:
    """Posterior band of the compensator against the observed counting process."""
    if isinstance(samples, PosteriorSamples):
        names = samples.names
        beta = samples.meta.get("beta", beta)
    draws = _matrix(samples)
    if draws.shape[0] == 0:
        raise ValueError("no posterior draws")
    mask = mask or FixedParamMask()
    names = tuple(names) if names is not None else mask.free_names
    beta = catalog.beta_mle() if beta is None else float(beta)
    if draws.shape[1] == 5 and names == ("mu", "k", "alpha", "c", "p"):
        full = draws
    else:
        full = mask.expand(draws, beta)
    if max_draws is not None and full.shape[0] > max_draws:
        idx = np.sort(np.random.default_rng(seed).choice(full.shape[0], max_draws, replace=False))
        full = full[idx]
    grid = np.linspace(0.0, catalog.window_end, 201) if grid is None else np.asarray(grid, dtype=float)
    curves = np.vstack([compensator(catalog, EtasParams.from_array(row, beta), grid) for row in full])
    observed = np.searchsorted(catalog.times, grid, side="right")
    return CompensatorBand(
        grid,
        curves.mean(axis=0),
        np.quantile(curves, 0.025, axis=0),
        np.quantile(curves, 0.975, axis=0),
        observed,
    )


def summary_report(sections: dict) -> str:
    """Plain-text one-page report from {title: value-or-dict}."""
    lines = []
    for title, body in sections.items():
        lines.append(title)
        lines.append("-" * len(title))
        if isinstance(body, dict):
            width = max((len(str(k)) for k in body), default=0)
            for k, v in body.items():
                lines.append(f"  {str(k).ljust(width)}  {v}")
        else:
            lines.append(f"  {body}")
        lines.append("")
    return "\n".join(lines)


def interval_contains(samples, truth, level: float = 0.95) -> np.ndarray:
    """Per-parameter indicator that ``truth`` lies in the equal-tailed interval."""
    draws = _matrix(samples)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
    truth = np.asarray(truth, dtype=float)
    return (truth >= lo) & (truth <= hi)


def binomial_halfwidth(p: float, n: int, z: float = 1.96) -> float:
    return z * math.sqrt(p * (1.0 - p) / n)
