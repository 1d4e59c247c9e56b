"""Runtime scaling of simulation, summaries, likelihood and one SNPE round."""
from __future__ import annotations

import logging
import resource
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .core import EtasParams, PriorSpec
from .engine import SnpeConfig, snpe_run
from .likelihood import log_likelihood
from .nde import TrainConfig
from .parallel import task_rng
from .simulate import SimConfig, simulate_branching
from .summaries import SummaryConfig, summarize
from .tasks import EtasTask

log = logging.getLogger(__name__)


class BenchTimeout(RuntimeError):
    pass


@dataclass
class BenchRow:
    window_end: float
    n_events: float
    sim_seconds: float
    summary_seconds: float
    loglik_seconds: float
    snpe_seconds: float | None
    peak_bytes: int
    maxrss_kb: int


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)
    timed_out: bool = False

    def slope(self, column: str) -> float:
        """Least-squares slope of log(time) against log(event count)."""
        n = np.array([r.n_events for r in self.rows])
        t = np.array([getattr(r, column) for r in self.rows], dtype=float)
        if column == "sim_seconds":
            t = t + np.array([r.summary_seconds for r in self.rows])
        ok = (n > 0) & (t > 0) & np.isfinite(t)
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(n[ok]), np.log(t[ok]), 1)[0])

    def slopes(self) -> dict:
        out = {"simulation+summary": self.slope("sim_seconds"), "likelihood": self.slope("loglik_seconds")}
        if self.rows and all(r.snpe_seconds is not None for r in self.rows):
            out["snpe_round"] = self.slope("snpe_seconds")
        return out

    def to_csv(self) -> str:
        head = "window_end,n_events,sim_seconds,summary_seconds,loglik_seconds,snpe_seconds,peak_bytes,maxrss_kb"
        lines = [head]
        for r in self.rows:
            snpe = "" if r.snpe_seconds is None else f"{r.snpe_seconds:.6g}"
            lines.append(
                f"{r.window_end!r},{r.n_events:.1f},{r.sim_seconds:.6g},{r.summary_seconds:.6g},"
                f"{r.loglik_seconds:.6g},{snpe},{r.peak_bytes},{r.maxrss_kb}"
            )
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        lines = [f"{'T':>8} {'events':>8} {'sim+sum s':>10} {'loglik s':>10} {'snpe s':>8} {'peak MB':>8}"]
        for r in self.rows:
            snpe = "-" if r.snpe_seconds is None else f"{r.snpe_seconds:.2f}"
            lines.append(
                f"{r.window_end:8.0f} {r.n_events:8.0f} {r.sim_seconds + r.summary_seconds:10.4f} "
                f"{r.loglik_seconds:10.4f} {snpe:>8} {r.peak_bytes / 2**20:8.1f}"
            )
        for k, v in self.slopes().items():
            lines.append(f"slope[{k}] = {v:.3f}")
        if self.timed_out:
            lines.append("partial table: per-cell timeout reached")
        return "\n".join(lines)


def run_bench(
    params: EtasParams,
    window_ends=(1000.0, 2000.0, 4000.0, 8000.0, 16000.0),
    repeats: int = 3,
    seed: int = 0,
    m0: float = 3.0,
    snpe_sims: int = 0,
    prior: PriorSpec | None = None,
    timeout: float = 600.0,
    summary: SummaryConfig = SummaryConfig(),
) -> BenchResult:
    """Time each stage on catalogs across the T-grid (best of ``repeats``)."""
    result = BenchResult()
    # warm the compiled kernels so the first cell is not charged for them
    warm = simulate_branching(params, SimConfig(100.0, m0), task_rng(seed, 999)).catalog
    if warm is not None:
        log_likelihood(warm, params)
        summarize(warm, summary)
    for T in window_ends:
        start = time.perf_counter()
        cfg = SimConfig(float(T), m0)
        sim_t, sum_t, ll_t, counts = [], [], [], []
        for r in range(repeats):
            rng = task_rng(seed, int(T), r)
            t0 = time.perf_counter()
            res = simulate_branching(params, cfg, rng)
            t1 = time.perf_counter()
            if res.catalog is None:
                raise RuntimeError(f"simulation truncated at T={T}")
            summarize(res.catalog, summary)
            t2 = time.perf_counter()
            log_likelihood(res.catalog, params)
            t3 = time.perf_counter()
            sim_t.append(t1 - t0)
            sum_t.append(t2 - t1)
            ll_t.append(t3 - t2)
            counts.append(res.catalog.n)
        snpe_t = None
        if snpe_sims and prior is not None:
            task = EtasTask(prior, params.beta, cfg, summary)
            t0 = time.perf_counter()
            snpe_run(task, summarize(res.catalog, summary).values,
                     SnpeConfig(rounds=1, sims_per_round=snpe_sims, n_posterior=100,
                                train=TrainConfig(max_epochs=200), seed=seed))
            snpe_t = time.perf_counter() - t0
        # memory on a separate untimed pass so tracing does not skew timings
        tracemalloc.start()
        again = simulate_branching(params, cfg, task_rng(seed, int(T), 0)).catalog
        summarize(again, summary)
        log_likelihood(again, params)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        result.rows.append(
            BenchRow(float(T), float(np.mean(counts)), min(sim_t), min(sum_t), min(ll_t), snpe_t, peak,
                     resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
        )
        log.info("bench T=%g: %d events, %.3fs", T, counts[0], time.perf_counter() - start)
        if time.perf_counter() - start > timeout:
            result.timed_out = True
            break
    return result
