"""ETAS catalog simulation.

``simulate_branching`` generates the cluster process generation by
generation and sorts once at the end.  ``simulate_thinning`` is the
sequential Ogata scheme; it is quadratic in the event count and exists as
an independent check on the branching simulator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Catalog, EtasParams, omori_density, omori_sample, sample_magnitude
from .parallel import ordered_map, task_rng


@dataclass(frozen=True)
class SimConfig:
    window_end: float
    m0: float = 3.0
    max_events: int = 10**6
    seed: int = 0
    record_branching: bool = False

    def __post_init__(self):
        if not self.window_end > 0:
            raise ValueError("window_end must be positive")
        if self.max_events < 1:
            raise ValueError("max_events must be >= 1")


@dataclass(frozen=True)
class SimResult:
    """Outcome of one simulation.

    ``catalog`` is None when the run was truncated at ``max_events``.
    ``parents`` holds 1-based, time-ordered parent indices (0 = background)
    when branching was recorded.
    """

    catalog: Catalog | None
    truncated: bool = False
    parents: np.ndarray | None = None
    n_attempted: int = 0

    @property
    def ok(self) -> bool:
        return not self.truncated


class SimulationTruncated(RuntimeError):
    pass


def _make_strict(times: np.ndarray) -> np.ndarray:
    # float collisions of parent time + sub-ulp delay; vanishingly rare
    bad = np.flatnonzero(np.diff(times) <= 0)
    if bad.size:
        times = times.copy()
        for i in range(bad[0] + 1, times.size):
            if times[i] <= times[i - 1]:
                times[i] = np.nextafter(times[i - 1], np.inf)
    return times


def simulate_branching(params: EtasParams, config: SimConfig, rng: np.random.Generator) -> SimResult:
    T = config.window_end
    m0 = config.m0
    n_bg = rng.poisson(params.mu * T) if params.mu > 0 else 0
    if n_bg > config.max_events:
        return SimResult(None, truncated=True, n_attempted=n_bg)

    t_gen = rng.uniform(0.0, T, n_bg)
    m_gen = sample_magnitude(rng, params.beta, m0, n_bg)
    times = [t_gen]
    mags = [m_gen]
    parents = [np.full(n_bg, -1, dtype=np.int64)]
    offset = 0
    total = n_bg

    while t_gen.size and params.k > 0:
        expected = params.k * np.exp(params.alpha * (m_gen - m0))
        counts = rng.poisson(expected)
        n_off = int(counts.sum())
        if n_off == 0:
            break
        gen_index = np.arange(offset, offset + t_gen.size, dtype=np.int64)
        offset += t_gen.size
        t_child = np.repeat(t_gen, counts) + omori_sample(rng, params.c, params.p, n_off)
        m_child = sample_magnitude(rng, params.beta, m0, n_off)
        keep = t_child < T
        t_gen = t_child[keep]
        m_gen = m_child[keep]
        total += t_gen.size
        if total > config.max_events:
            return SimResult(None, truncated=True, n_attempted=total)
        times.append(t_gen)
        mags.append(m_gen)
        if config.record_branching:
            parents.append(np.repeat(gen_index, counts)[keep])

    all_t = np.concatenate(times)
    all_m = np.concatenate(mags)
    order = np.argsort(all_t, kind="stable")
    sorted_t = _make_strict(all_t[order])
    catalog = Catalog(sorted_t, all_m[order], T, m0)

    record = None
    if config.record_branching:
        raw_parent = np.concatenate(parents)
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        p = raw_parent[order]
        record = np.where(p < 0, 0, rank[np.maximum(p, 0)] + 1)
    return SimResult(catalog, parents=record, n_attempted=total)


def intensity_at(t: float, catalog: Catalog, params: EtasParams) -> float:
    """Conditional intensity mu + sum over t_i < t of k(m_i) h(t - t_i)."""
    mask = catalog.times < t
    if not mask.any():
        return params.mu
    lag = t - catalog.times[mask]
    kern = params.k * np.exp(params.alpha * (catalog.mags[mask] - catalog.m0))
    return params.mu + float(np.sum(kern * omori_density(lag, params.c, params.p)))


def simulate_thinning(params: EtasParams, config: SimConfig, rng: np.random.Generator) -> SimResult:
    T = config.window_end
    m0 = config.m0
    jump0 = (params.p - 1.0) / params.c
    times: list[float] = []
    mags: list[float] = []
    weights: list[float] = []
    t = 0.0
    bound = params.mu
    while True:
        if bound <= 0:
            break
        t = t + rng.exponential(1.0 / bound)
        if t >= T:
            break
        if times:
            lag = t - np.asarray(times)
            excite = float(np.dot(weights, (1.0 + lag / params.c) ** (-params.p))) * jump0
        else:
            excite = 0.0
        lam = params.mu + excite
        if rng.random() * bound <= lam:
            m = float(sample_magnitude(rng, params.beta, m0))
            times.append(t)
            mags.append(m)
            weights.append(params.k * np.exp(params.alpha * (m - m0)))
            if len(times) > config.max_events:
                return SimResult(None, truncated=True, n_attempted=len(times))
            bound = lam + weights[-1] * jump0
        else:
            # intensity only decays between events
            bound = lam
    return SimResult(Catalog(np.array(times), np.array(mags), T, m0), n_attempted=len(times))


def _batch_one(params, config, master_seed, i, method):
    rng = task_rng(master_seed, i)
    sim = simulate_branching if method == "branching" else simulate_thinning
    return sim(params, config, rng)


def simulate_batch(
    params: EtasParams,
    config: SimConfig,
    n: int,
    master_seed: int | None = None,
    method: str = "branching",
    threads: int | None = None,
) -> list[SimResult]:
    """Run ``n`` independent simulations seeded by (master_seed, index)."""
    seed = config.seed if master_seed is None else master_seed
    args = [(params, config, seed, i, method) for i in range(n)]
    return ordered_map(_batch_one, args, threads)
