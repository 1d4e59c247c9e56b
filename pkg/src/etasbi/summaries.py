"""Fixed-length summary statistics of a catalog.

Layout (39 entries with the default configuration)::

    s01            log(1 + n)
    s02-s04        inter-event time quantiles
    s05            mean / median inter-event time
    s06-s23        Ripley K at 18 windows
    s24-s39        magnitude-thresholded Ripley K, 4 thresholds x 4 windows
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .core import Catalog


class SummaryConfigMismatch(ValueError):
    pass


def _default_windows() -> tuple[float, ...]:
    geo = np.geomspace(0.01, 1.0, 9)
    lin = np.linspace(2.0, 10.0, 9)
    return tuple(float(x) for x in np.concatenate([geo, lin]))


@dataclass(frozen=True)
class SummaryConfig:
    quantiles: tuple[float, ...] = (0.2, 0.5, 0.9)
    windows: tuple[float, ...] = field(default_factory=_default_windows)
    thresholds: tuple[float, ...] = (4.5, 5.0, 5.5, 6.0)
    threshold_windows: tuple[float, ...] = (0.2, 0.5, 1.0, 3.0)
    # scale ABC distances by per-statistic spread
    standardize: bool = True

    def __post_init__(self):
        for name in ("quantiles", "windows", "thresholds", "threshold_windows"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not all(0 < q < 1 for q in self.quantiles):
            raise ValueError("quantile levels must lie in (0, 1)")
        for name in ("windows", "threshold_windows"):
            w = np.asarray(getattr(self, name))
            if w.size and (np.any(w <= 0) or np.any(np.diff(w) <= 0)):
                raise ValueError(f"{name} must be positive and strictly increasing")

    @property
    def length(self) -> int:
        return 1 + len(self.quantiles) + 1 + len(self.windows) + len(self.thresholds) * len(self.threshold_windows)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def names(self) -> list[str]:
        labels = ["logn"]
        labels += [f"q{round(q * 100):d}" for q in self.quantiles]
        labels.append("mean_median")
        labels += [f"k_w{_fmt(w)}" for w in self.windows]
        labels += [f"kt_m{m:.1f}_w{_fmt(w)}" for m in self.thresholds for w in self.threshold_windows]
        width = max(2, len(str(len(labels))))
        return [f"s{i + 1:0{width}d}_{lab}" for i, lab in enumerate(labels)]


def _fmt(w: float) -> str:
    return f"{w:.4g}"


@dataclass(frozen=True)
class SummaryVector:
    values: np.ndarray
    fingerprint: str

    def __len__(self) -> int:
        return self.values.size


def summary_count(catalog: Catalog) -> float:
    return math.log1p(catalog.n)


def interevent_stats(catalog: Catalog, levels=(0.2, 0.5, 0.9)) -> np.ndarray:
    """Inter-event time quantiles followed by the mean/median ratio."""
    levels = np.asarray(levels, dtype=float)
    if catalog.n < 2:
        return np.concatenate([np.full(levels.size, catalog.window_end), [1.0]])
    gaps = np.diff(catalog.times)
    q = np.quantile(gaps, levels)
    med = np.median(gaps)
    ratio = float(np.mean(gaps) / med) if med > 0 else 1.0
    return np.concatenate([q, [ratio]])


def ripley_pair_counts(times, windows) -> np.ndarray:
    """#{(i, j): 0 < t_j - t_i <= w} for each window, by sliding pointers."""
    return _kernels.ripley_pair_counts(
        np.ascontiguousarray(times, dtype=float), np.ascontiguousarray(windows, dtype=float)
    )


def ripley_k(catalog: Catalog, windows) -> np.ndarray:
    windows = np.asarray(windows, dtype=float)
    n = catalog.n
    if n < 2:
        return np.zeros(windows.size)
    return ripley_pair_counts(catalog.times, windows) * (catalog.window_end / n**2)


def thresholded_pair_counts(times, mags, threshold: float, windows) -> tuple[np.ndarray, int]:
    """Events within w after each anchor with magnitude >= threshold."""
    times = np.asarray(times, dtype=float)
    windows = np.asarray(windows, dtype=float)
    anchors = np.flatnonzero(np.asarray(mags) >= threshold)
    if anchors.size == 0:
        return np.zeros(windows.size, dtype=np.int64), 0
    ends = np.searchsorted(times, times[anchors][:, None] + windows[None, :], side="right")
    counts = (ends - anchors[:, None] - 1).sum(axis=0)
    return counts.astype(np.int64), int(anchors.size)


def ripley_k_thresholded(catalog: Catalog, thresholds, windows) -> np.ndarray:
    """Thresholded Ripley K, thresholds outer and windows inner."""
    out = []
    for m_t in thresholds:
        counts, nu = thresholded_pair_counts(catalog.times, catalog.mags, m_t, windows)
        out.append(counts * (catalog.window_end / nu**2) if nu else np.zeros(len(windows)))
    return np.concatenate(out) if out else np.zeros(0)


def summarize(catalog: Catalog, config: SummaryConfig = SummaryConfig()) -> SummaryVector:
    vals = np.concatenate(
        [
            [summary_count(catalog)],
            interevent_stats(catalog, config.quantiles),
            ripley_k(catalog, config.windows),
            ripley_k_thresholded(catalog, config.thresholds, config.threshold_windows),
        ]
    )
    return SummaryVector(vals, config.fingerprint())


def stack(vectors: list[SummaryVector]) -> np.ndarray:
    """Stack summary vectors, refusing to mix configurations."""
    if not vectors:
        return np.zeros((0, 0))
    fp = vectors[0].fingerprint
    for v in vectors[1:]:
        if v.fingerprint != fp:
            raise SummaryConfigMismatch(f"fingerprint {v.fingerprint} != {fp}")
    return np.vstack([v.values for v in vectors])
