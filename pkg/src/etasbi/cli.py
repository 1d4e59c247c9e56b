"""Command-line driver: simulate, summarize, infer, diagnose, bench, ingest.

Errors print a single line ``etasbi-error[<code>:<kind>] <message>`` to
stderr and exit with the code: 2 config, 3 data, 4 numerical, 5 timeout.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchTimeout, run_bench
from .config import ConfigError, RunConfig, load_config
from .core import EtasDomainError, EtasParams, PosteriorSamples, PriorExhaustedError
from .diagnostics import (
    C2stConfig,
    DegenerateSampleError,
    ImbalanceError,
    c2st,
    compensator_check,
    coverage,
    etas_replicates,
    mmd,
    summary_report,
)
from .engine import SimulationBudgetError, abc_mcmc, abc_rejection, snpe_run
from .gibbs import LARGE_CATALOG, gibbs_sample
from .io import (
    DataError,
    append_jsonl,
    read_catalog,
    read_samples,
    read_scedc,
    write_catalog,
    write_dataset,
    write_json,
    write_samples,
)
from .likelihood import LikelihoodError, mle
from .nde import DivergenceError
from .parallel import set_threads, task_rng
from .simulate import SimConfig, simulate_branching, simulate_thinning
from .summaries import SummaryConfigMismatch, summarize
from .tasks import EtasTask

log = logging.getLogger("etasbi")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_TIMEOUT = 2, 3, 4, 5

_ERROR_CODES = [
    (ConfigError, EXIT_CONFIG, "config"),
    ((DataError, SummaryConfigMismatch, ImbalanceError, FileNotFoundError, EtasDomainError), EXIT_DATA, "data"),
    (
        (DivergenceError, LikelihoodError, PriorExhaustedError, SimulationBudgetError, DegenerateSampleError,
         FloatingPointError),
        EXIT_NUMERIC,
        "numerical",
    ),
    (BenchTimeout, EXIT_TIMEOUT, "timeout"),
]


class GuardError(DataError):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    p.add_argument("--threads", type=int, help="worker cap for parallel simulation")
    p.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VAL",
                   help="override one config value; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="etasbi", description="Likelihood-free and exact inference for temporal ETAS.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simulate catalogs at [model] parameters")

    p = sub.add_parser("summarize", parents=[common], help="summary vectors of catalog files")
    p.add_argument("catalogs", nargs="+", type=Path)

    p = sub.add_parser("infer", parents=[common], help="posterior inference on a catalog")
    p.add_argument("method", choices=["snpe", "abc", "abc-mcmc", "gibbs", "mle"])
    p.add_argument("--catalog", type=Path, help="catalog CSV (overrides [run] catalog)")
    p.add_argument("--allow-large", action="store_true", help="run gibbs on catalogs above the size guard")

    p = sub.add_parser("diagnose", parents=[common], help="compare or validate posterior samples")
    p.add_argument("what", choices=["mmd", "c2st", "coverage", "compensator"])
    p.add_argument("--samples", type=Path, nargs="+", default=[], help="sample CSV file(s)")
    p.add_argument("--catalog", type=Path)
    p.add_argument("--method", choices=["snpe", "gibbs", "abc"], default="gibbs", help="runner for coverage")

    sub.add_parser("bench", parents=[common], help="runtime scaling over the [bench] T grid")

    p = sub.add_parser("ingest", parents=[common], help="convert a SCEDC export into a catalog CSV")
    p.add_argument("path", type=Path)
    p.add_argument("--m-cut", type=float, default=2.5)
    p.add_argument("--start", default="1981-01-01")
    p.add_argument("--end", default="2022-01-01", help="exclusive end date")
    p.add_argument("--window-end", type=float, help="override T (days)")
    return parser


def _resolve(args) -> RunConfig:
    over = list(args.override)
    if args.seed is not None:
        over.append(f"run.seed={args.seed}")
    if args.threads is not None:
        over.append(f"run.threads={args.threads}")
    if args.out is not None:
        over.append(f"run.out={args.out}")
    return load_config(args.config, over)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _true_params(cfg: RunConfig) -> EtasParams:
    beta = cfg["model"]["beta"]
    if beta is None:
        raise ConfigError("[model] beta must be numeric for simulation")
    return EtasParams.from_array(cfg.true_params_array(), beta)


def _load_catalog(cfg: RunConfig, path):
    path = path or cfg["run"]["catalog"]
    if not path:
        raise ConfigError("no catalog given (--catalog or [run] catalog)")
    catalog, report = read_catalog(path)
    if report.below_m0 or report.ties_broken:
        log.info("catalog %s: %d below m0 dropped, %d ties broken", path, report.below_m0, report.ties_broken)
    return catalog


def _beta(cfg: RunConfig, catalog) -> float:
    beta = cfg["model"]["beta"]
    return catalog.beta_mle() if beta is None else beta


# commands -------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    params = _true_params(cfg)
    sim = cfg.sim()
    fn = simulate_thinning if cfg["sim"]["method"] == "thinning" else simulate_branching
    seed = cfg["run"]["seed"]
    manifest = {"seed": seed, "params": params.as_array(), "beta": params.beta, "method": cfg["sim"]["method"],
                "catalogs": []}
    for i in range(cfg["sim"]["n_catalogs"]):
        res = fn(params, sim, task_rng(seed, i))
        name = f"catalog_{i:04d}.csv"
        entry = {"file": name, "index": i, "truncated": res.truncated, "n_attempted": res.n_attempted}
        if res.truncated:
            log.warning("catalog %d truncated at max_events=%d", i, sim.max_events)
        else:
            write_catalog(out / name, res.catalog, {"seed": seed, "index": i})
            entry["n_events"] = res.catalog.n
        manifest["catalogs"].append(entry)
    write_json(out / "manifest.json", manifest)
    cfg.write(out / "config.ini")
    print(f"wrote {len(manifest['catalogs'])} catalog(s) to {out}")
    return 0


def cmd_summarize(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    sc = cfg.summary()
    rows = []
    for path in args.catalogs:
        catalog, _ = read_catalog(path)
        rows.append([str(path)] + [repr(v) for v in summarize(catalog, sc).values.tolist()])
    lines = [",".join(["catalog"] + sc.names())] + [",".join(r) for r in rows]
    (out / "summaries.csv").write_text("\n".join(lines) + "\n")
    cfg.write(out / "config.ini")
    print(f"wrote {len(rows)} summary vector(s) to {out / 'summaries.csv'}")
    return 0


def _task(cfg: RunConfig, catalog) -> EtasTask:
    beta = _beta(cfg, catalog)
    sim = SimConfig(catalog.window_end, catalog.m0, cfg["sim"]["max_events"], cfg["run"]["seed"])
    return EtasTask(cfg.prior(), beta, sim, cfg.summary(), cfg.mask())


def cmd_infer(cfg: RunConfig, args) -> int:
    catalog = _load_catalog(cfg, args.catalog)
    out = _out_dir(cfg)
    cfg.write(out / "config.ini")
    method = args.method
    beta = _beta(cfg, catalog)
    mask = cfg.mask()
    threads = cfg["run"]["threads"]
    info: dict = {"method": method, "n_events": catalog.n, "beta": beta, "window_end": catalog.window_end}

    if method == "mle":
        full = np.array(cfg.true_params_array(), dtype=float)
        res = mle(catalog, EtasParams.from_array(full, beta), mask)
        info.update({"params": dict(zip(("mu", "k", "alpha", "c", "p"), res.params.as_array().tolist())),
                     "log_likelihood": res.log_likelihood, "converged": res.converged,
                     "n_evaluations": res.n_evaluations})
        write_json(out / "mle.json", info)
        print(f"mle: {info['params']} loglik={res.log_likelihood:.6f}")
        return 0

    if method == "gibbs":
        if catalog.n > LARGE_CATALOG and not (args.allow_large or cfg["run"]["allow_large"]):
            raise GuardError(f"{catalog.n} events exceeds the gibbs guard of {LARGE_CATALOG}; pass --allow-large")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=UserWarning)
            samples = gibbs_sample(catalog, cfg.prior(), cfg.mcmc(), mask, beta)
        info["acceptance"] = samples.meta["acceptance"]
    else:
        task = _task(cfg, catalog)
        s_obs = task.observe(catalog)
        if method == "snpe":
            (out / "models").mkdir(exist_ok=True)
            (out / "rounds").mkdir(exist_ok=True)
            log_path = out / "rounds.jsonl"
            log_path.unlink(missing_ok=True)
            snames = cfg.summary().names()

            def on_round(rec, model, theta, S):
                append_jsonl(log_path, rec.to_json())
                model.save(out / "models" / f"round_{rec.round:02d}.mdn")
                write_dataset(out / "rounds" / f"round_{rec.round:02d}.csv", task.names, snames, theta, S)

            result = snpe_run(task, s_obs, cfg.snpe(), threads=threads, on_round=on_round)
            samples = result.samples
        elif method == "abc":
            samples = abc_rejection(task, s_obs, cfg.abc(), threads=threads)
            info.update({k: v for k, v in samples.meta.items() if k != "distances"})
        else:
            samples = abc_mcmc(task, s_obs, cfg.abc(), threads=threads)
            info.update(samples.meta)
    samples.meta["beta"] = beta
    write_samples(out / "samples.csv", samples)
    info["n_samples"] = len(samples)
    write_json(out / "run.json", info)
    print(f"{method}: wrote {len(samples)} samples to {out / 'samples.csv'}")
    return 0


def cmd_diagnose(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    what = args.what
    report: dict = {}
    if what in ("mmd", "c2st"):
        if len(args.samples) != 2:
            raise ConfigError(f"{what} needs exactly two --samples files")
        a, b = (read_samples(p) for p in args.samples)
        if a.names != b.names:
            raise DataError(f"parameter columns differ: {a.names} vs {b.names}")
        if what == "mmd":
            r = mmd(a, b)
            report = {"mmd": r.value, "mmd_raw": r.raw, "bandwidth": r.bandwidth}
        else:
            report = {"c2st_accuracy": c2st(a, b, C2stConfig(seed=cfg["run"]["seed"]))}
        (out / f"{what}.csv").write_text(
            ",".join(report) + "\n" + ",".join(repr(float(v)) for v in report.values()) + "\n"
        )
    elif what == "compensator":
        catalog = _load_catalog(cfg, args.catalog)
        if len(args.samples) != 1:
            raise ConfigError("compensator needs one --samples file")
        samples = read_samples(args.samples[0])
        band = compensator_check(
            catalog, samples.samples, beta=_beta(cfg, catalog), mask=cfg.mask(), names=samples.names,
            max_draws=cfg["diagnostics"]["max_draws"], seed=cfg["run"]["seed"],
        )
        (out / "compensator.csv").write_text(band.to_csv())
        inside = bool(band.lo[-1] <= band.observed[-1] <= band.hi[-1])
        report = {"N(T)": int(band.observed[-1]), "mean Lambda(T)": float(band.mean[-1]),
                  "95% band at T": f"[{band.lo[-1]:.1f}, {band.hi[-1]:.1f}]", "N(T) inside band": inside}
    else:
        rep = _coverage(cfg, args.method)
        (out / "coverage.csv").write_text(rep.to_csv())
        report = {f"gamma={g:.2f}": f"{c:.3f} ({k})" for g, c, k in zip(rep.levels, rep.coverage, rep.classify())}
        report["replicates"] = rep.n_replicates
        report["failed"] = rep.n_failed
    text = summary_report({f"diagnose {what}": report})
    (out / f"{what}_report.txt").write_text(text)
    cfg.write(out / "config.ini")
    print(text)
    return 0


def _coverage(cfg: RunConfig, method: str):
    prior = cfg.prior()
    beta = cfg["model"]["beta"]
    if beta is None:
        raise ConfigError("[model] beta must be numeric for coverage replicates")
    sim = cfg.sim()
    task = EtasTask(prior, beta, sim, cfg.summary(), cfg.mask())

    def runner(catalog, i):
        if method == "gibbs":
            mc = cfg.mcmc()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", category=UserWarning)
                return gibbs_sample(catalog, prior, mc, cfg.mask(), beta).samples
        s_obs = task.observe(catalog)
        if method == "snpe":
            return snpe_run(task, s_obs, cfg.snpe(), threads=cfg["run"]["threads"]).samples.samples
        return abc_rejection(task, s_obs, cfg.abc(), threads=cfg["run"]["threads"]).samples

    d = cfg["diagnostics"]
    return coverage(runner, etas_replicates(task), d["n_replicates"], d["levels"], d["coverage_mode"],
                    seed=cfg["run"]["seed"], names=task.names)


def cmd_bench(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    b = cfg["bench"]
    res = run_bench(
        _true_params(cfg), b["window_ends"], b["repeats"], cfg["run"]["seed"], cfg["model"]["m0"],
        b["snpe_sims"], cfg.prior(), b["timeout"], cfg.summary(),
    )
    (out / "bench.csv").write_text(res.to_csv())
    write_json(out / "bench_slopes.json", res.slopes())
    cfg.write(out / "config.ini")
    print(res.table())
    if res.timed_out:
        raise BenchTimeout("per-cell timeout reached; partial table written")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    start = datetime.fromisoformat(args.start) if args.start else None
    end = datetime.fromisoformat(args.end) if args.end else None
    catalog, report = read_scedc(args.path, args.m_cut, start, end, args.window_end)
    out = _out_dir(cfg)
    target = out / "catalog.csv"
    write_catalog(target, catalog, report.metadata)
    print(
        f"ingested {report.n_kept} events ({report.below_m0} below cut, {report.outside_window} outside window, "
        f"{report.malformed} malformed, {report.ties_broken} ties broken) -> {target}"
    )
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "summarize": cmd_summarize,
    "infer": cmd_infer,
    "diagnose": cmd_diagnose,
    "bench": cmd_bench,
    "ingest": cmd_ingest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        set_threads(cfg["run"]["threads"])
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        for types, code, kind in _ERROR_CODES:
            if isinstance(exc, types):
                msg = str(exc).replace("\n", " ")
                print(f"etasbi-error[{code}:{kind}] {msg}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
