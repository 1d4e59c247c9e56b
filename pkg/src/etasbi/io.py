"""Catalog files, SCEDC ingestion and run-directory persistence.

Catalog CSV layout::

    # window_end=10000.0
    # m0=3.0
    time,magnitude
    0.8813...,3.41
    ...

Floats are written with ``repr`` (shortest round-trip form), so reading a
written file gives back identical values.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .core import Catalog, PosteriorSamples

log = logging.getLogger(__name__)

TIE_STEP = 1e-9


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class EmptyCatalogWarning(UserWarning):
    pass


@dataclass
class IngestReport:
    n_read: int = 0
    n_kept: int = 0
    below_m0: int = 0
    outside_window: int = 0
    malformed: int = 0
    ties_broken: int = 0
    metadata: dict = field(default_factory=dict)


def break_ties(times: np.ndarray, step: float = TIE_STEP) -> tuple[np.ndarray, int]:
    """Make sorted times strictly increasing by nudging repeats forward."""
    t = np.array(times, dtype=float)
    n = 0
    for i in range(1, t.size):
        if t[i] <= t[i - 1]:
            t[i] = t[i - 1] + step
            n += 1
    return t, n


def _parse_meta(line: str, meta: dict) -> None:
    body = line.lstrip("#").strip()
    if "=" in body:
        key, val = body.split("=", 1)
        meta[key.strip()] = val.strip()


def _parse_time(text: str):
    try:
        return float(text)
    except ValueError:
        return datetime.fromisoformat(text.strip().replace("Z", "+00:00"))


def days_between(a: datetime, b: datetime) -> float:
    return (b - a) / timedelta(days=1)


def read_catalog(path, m0: float | None = None, window_end: float | None = None) -> tuple[Catalog, IngestReport]:
    """Read a catalog CSV; explicit arguments override the ``#`` metadata."""
    meta: dict = {}
    rows = []
    report = IngestReport()
    with open(path, newline="") as fh:
        header = None
        for lineno, line in enumerate(fh, 1):
            if line.startswith("#"):
                _parse_meta(line, meta)
                continue
            if not line.strip():
                continue
            fields = [f.strip() for f in line.rstrip("\n").split(",")]
            if header is None:
                header = [h.lower() for h in fields]
                if header[:2] != ["time", "magnitude"]:
                    raise DataError(f"{path}: expected header 'time,magnitude', got {line.strip()!r}")
                continue
            report.n_read += 1
            try:
                rows.append((_parse_time(fields[0]), float(fields[1])))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse row {line.strip()!r}") from exc
    if header is None:
        raise DataError(f"{path}: missing 'time,magnitude' header")
    report.metadata = meta

    if rows and isinstance(rows[0][0], datetime):
        if not all(isinstance(t, datetime) for t, _ in rows):
            raise DataError(f"{path}: mixed numeric and timestamp times")
        origin = min(t for t, _ in rows)
        meta.setdefault("origin", origin.isoformat())
        times = np.array([days_between(origin, t) for t, _ in rows])
    else:
        if any(isinstance(t, datetime) for t, _ in rows):
            raise DataError(f"{path}: mixed numeric and timestamp times")
        times = np.array([t for t, _ in rows], dtype=float)
    mags = np.array([m for _, m in rows], dtype=float)

    m0 = float(meta["m0"]) if m0 is None and "m0" in meta else m0
    if m0 is None:
        m0 = float(mags.min()) if mags.size else 0.0
    keep = mags >= m0
    report.below_m0 = int((~keep).sum())
    if report.below_m0:
        log.info("dropped %d events below m0=%g", report.below_m0, m0)
    times, mags = times[keep], mags[keep]
    order = np.argsort(times, kind="stable")
    times, mags = times[order], mags[order]
    times, report.ties_broken = break_ties(times)
    if report.ties_broken:
        log.info("broke %d time ties", report.ties_broken)

    T = float(meta["window_end"]) if window_end is None and "window_end" in meta else window_end
    if T is None:
        T = float(times[-1]) + 1.0 if times.size else 1.0
    if times.size and (times[0] < 0 or times[-1] > T):
        raise DataError(f"{path}: event times must lie in [0, {T}]")
    report.n_kept = int(times.size)
    return Catalog(times, mags, T, m0), report


def format_catalog(catalog: Catalog, meta: dict | None = None) -> str:
    lines = [f"# window_end={catalog.window_end!r}", f"# m0={catalog.m0!r}"]
    for k, v in (meta or {}).items():
        if k in ("window_end", "m0"):
            continue
        lines.append(f"# {k}={v}")
    lines.append("time,magnitude")
    lines += [f"{t!r},{m!r}" for t, m in zip(catalog.times.tolist(), catalog.mags.tolist())]
    return "\n".join(lines) + "\n"


def write_catalog(path, catalog: Catalog, meta: dict | None = None) -> None:
    Path(path).write_text(format_catalog(catalog, meta))


# SCEDC ----------------------------------------------------------------------


def _scedc_datetime(date: str, clock: str) -> datetime:
    y, mo, d = (int(x) for x in date.replace("-", "/").split("/"))
    hh, mm, ss = clock.split(":")
    # some rows carry 60.00 seconds, so add the offset instead of constructing directly
    return datetime(y, mo, d) + timedelta(hours=int(hh), minutes=int(mm), seconds=float(ss))


def _scedc_rows(path):
    """Yield (lineno, fields) for data-looking lines of a SCEDC export."""
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = [f.strip() for f in (text.split(",") if "," in text else text.split())]
            yield lineno, fields


def read_scedc(
    path,
    m_cut: float = 2.5,
    start: datetime | None = datetime(1981, 1, 1),
    end: datetime | None = datetime(2022, 1, 1),
    window_end: float | None = None,
    event_types: tuple[str, ...] | None = None,
) -> tuple[Catalog, IngestReport]:
    """Parse a SCEDC catalog (fixed-column ASCII or CSV export).

    Expected columns: ``YYYY/MM/DD HH:MM:SS.ss ET GT MAG M LAT LON DEPTH Q
    EVID NPH NGRM``.  Rows with magnitude >= ``m_cut`` and ``start <= time <
    end`` are kept.  Times become days since the first kept event; the
    window runs one day past the last event unless ``window_end`` is given.
    """
    report = IngestReport()
    kept: list[tuple[datetime, float]] = []
    for lineno, f in _scedc_rows(path):
        if not f[0][:1].isdigit():
            continue  # column header
        report.n_read += 1
        try:
            when = _scedc_datetime(f[0], f[1])
            if event_types is not None and f[2].lower() not in event_types:
                report.outside_window += 1
                continue
            mag = float(f[4])
        except (ValueError, IndexError):
            report.malformed += 1
            log.debug("%s:%d: malformed row", path, lineno)
            continue
        if (start is not None and when < start) or (end is not None and when >= end):
            report.outside_window += 1
            continue
        if mag < m_cut:
            report.below_m0 += 1
            continue
        kept.append((when, mag))
    if report.malformed:
        log.warning("skipped %d malformed rows in %s", report.malformed, path)
    meta = {
        "source": str(path),
        "m_cut": repr(float(m_cut)),
        "start": start.isoformat() if start else "",
        "end": end.isoformat() if end else "",
        "malformed": str(report.malformed),
    }
    if not kept:
        warnings.warn(f"no events in {path} pass the filters", EmptyCatalogWarning, stacklevel=2)
        report.metadata = meta
        return Catalog.empty(1.0 if window_end is None else window_end, m_cut), report
    kept.sort(key=lambda r: r[0])
    origin = kept[0][0]
    times = np.array([days_between(origin, t) for t, _ in kept])
    mags = np.array([m for _, m in kept])
    times, report.ties_broken = break_ties(times)
    T = float(times[-1]) + 1.0 if window_end is None else float(window_end)
    meta["origin"] = origin.isoformat()
    meta["ties_broken"] = str(report.ties_broken)
    report.metadata = meta
    report.n_kept = int(times.size)
    return Catalog(times, mags, T, float(m_cut)), report


# samples and run records ----------------------------------------------------


def write_samples(path, samples: PosteriorSamples) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# method={samples.method}\n")
        if samples.seed is not None:
            fh.write(f"# seed={samples.seed}\n")
        if samples.round is not None:
            fh.write(f"# round={samples.round}\n")
        fh.write(",".join(samples.names) + "\n")
        for row in samples.samples.tolist():
            fh.write(",".join(repr(v) for v in row) + "\n")


def read_samples(path) -> PosteriorSamples:
    meta: dict = {}
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip()]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            _parse_meta(ln, meta)
        else:
            body.append(ln)
    if not body:
        raise DataError(f"{path}: no header line")
    names = tuple(x.strip() for x in body[0].split(","))
    try:
        data = np.array([[float(x) for x in ln.split(",")] for ln in body[1:]], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric sample entry") from exc
    data = data.reshape(-1, len(names))
    return PosteriorSamples(
        data,
        names,
        meta.get("method", "unknown"),
        seed=int(meta["seed"]) if "seed" in meta else None,
        round=int(meta["round"]) if "round" in meta else None,
    )


def write_dataset(path, names, summary_names, theta, summaries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + list(summary_names))
        for a, b in zip(np.atleast_2d(theta).tolist(), np.atleast_2d(summaries).tolist()):
            w.writerow([repr(v) for v in a + b])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, np.integer):
        return int(x)
    return x


def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
