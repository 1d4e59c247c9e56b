"""INI run configuration with typed keys, defaults and strict key checking."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .core import FixedParamMask, PriorSpec, format_marginal, synthetic_prior, parse_marginal
from .engine import AbcConfig, SnpeConfig
from .gibbs import McmcConfig
from .nde import TrainConfig
from .simulate import SimConfig
from .summaries import SummaryConfig


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(x) for x in text.split(",") if x.strip()) if text else ()


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(float(x)) for x in _floats(text))


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _fmt_seq(v) -> str:
    return ", ".join(repr(x) for x in v)


_P = synthetic_prior()

# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, "0"),
        "threads": (int, "1"),
        "out": (str, "runs/etasbi"),
        "catalog": (str, ""),
        "allow_large": (_bool, "false"),
    },
    "prior": {
        "mu": (parse_marginal, format_marginal(_P.mu)),
        "k": (parse_marginal, format_marginal(_P.k)),
        "alpha": (parse_marginal, format_marginal(_P.alpha)),
        "c": (parse_marginal, format_marginal(_P.c)),
        "p": (parse_marginal, format_marginal(_P.p)),
        "subcritical": (_bool, "true"),
    },
    "model": {
        # "auto" estimates beta from the catalog magnitudes
        "beta": (_opt_float, "2.4"),
        "m0": (float, "3.0"),
        # comma list of name=value; alpha=beta ties alpha to beta
        "fix": (str, ""),
        "mu": (float, "0.2"),
        "k": (float, "0.2"),
        "alpha": (float, "1.5"),
        "c": (float, "0.5"),
        "p": (float, "2.0"),
    },
    "sim": {
        "window_end": (float, "10000.0"),
        "max_events": (int, "1000000"),
        "method": (str, "branching"),
        "n_catalogs": (int, "1"),
    },
    "summary": {
        "quantiles": (_floats, _fmt_seq(SummaryConfig().quantiles)),
        "windows": (_floats, _fmt_seq(SummaryConfig().windows)),
        "thresholds": (_floats, _fmt_seq(SummaryConfig().thresholds)),
        "threshold_windows": (_floats, _fmt_seq(SummaryConfig().threshold_windows)),
        "standardize": (_bool, "true"),
    },
    "train": {
        "learning_rate": (float, "0.001"),
        "momentum": (float, "0.9"),
        "batch_size": (int, "256"),
        "max_epochs": (int, "1000"),
        "patience": (int, "20"),
        "validation_fraction": (float, "0.1"),
        "weight_decay": (float, "1e-06"),
        "max_restarts": (int, "3"),
        "hidden": (_ints, "64, 64"),
        "n_components": (int, "8"),
        "full_cov": (_bool, "true"),
    },
    "snpe": {
        "rounds": (int, "15"),
        "sims_per_round": (int, "2000"),
        "n_posterior": (int, "5000"),
        "correction": (str, "truncated"),
        "truncation_mass": (float, "0.001"),
        "max_redraw_factor": (int, "10"),
    },
    "abc": {
        "epsilon": (_opt_float, "none"),
        "epsilon_quantile": (float, "0.01"),
        "budget": (int, "10000"),
        "pilot_size": (int, "500"),
        "proposal_scale": (_opt_float, "none"),
        "chain_length": (_opt_int, "none"),
    },
    "mcmc": {
        "n_samples": (int, "5000"),
        "burn_in": (int, "5000"),
        "thinning": (int, "1"),
        "block_updates": (int, "5"),
        "branching_sampler": (str, "binned"),
    },
    "diagnostics": {
        "levels": (_floats, _fmt_seq(round(0.05 * i, 2) for i in range(1, 20))),
        "coverage_mode": (str, "joint"),
        "n_replicates": (int, "20"),
        "max_draws": (int, "1000"),
    },
    "bench": {
        "window_ends": (_floats, "1000.0, 2000.0, 4000.0, 8000.0, 16000.0"),
        "repeats": (int, "3"),
        "snpe_sims": (int, "200"),
        "timeout": (float, "600.0"),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    text: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    # builders -------------------------------------------------------------

    def prior(self) -> PriorSpec:
        p = self["prior"]
        return PriorSpec(p["mu"], p["k"], p["alpha"], p["c"], p["p"], subcritical=p["subcritical"])

    def mask(self) -> FixedParamMask:
        fixed = {}
        for item in self["model"]["fix"].split(","):
            if not item.strip():
                continue
            name, _, val = item.partition("=")
            name, val = name.strip(), val.strip()
            fixed[name] = "beta" if val == "beta" else float(val)
        return FixedParamMask(fixed)

    def true_params_array(self):
        m = self["model"]
        return [m["mu"], m["k"], m["alpha"], m["c"], m["p"]]

    def sim(self, seed: int | None = None) -> SimConfig:
        s = self["sim"]
        return SimConfig(
            window_end=s["window_end"],
            m0=self["model"]["m0"],
            max_events=s["max_events"],
            seed=self["run"]["seed"] if seed is None else seed,
        )

    def summary(self) -> SummaryConfig:
        s = self["summary"]
        return SummaryConfig(s["quantiles"], s["windows"], s["thresholds"], s["threshold_windows"], s["standardize"])

    def train(self) -> TrainConfig:
        t = self["train"]
        keys = ("learning_rate", "momentum", "batch_size", "max_epochs", "patience", "validation_fraction",
                "weight_decay", "max_restarts")
        return TrainConfig(**{k: t[k] for k in keys}, seed=self["run"]["seed"])

    def snpe(self) -> SnpeConfig:
        s, t = self["snpe"], self["train"]
        return SnpeConfig(
            rounds=s["rounds"],
            sims_per_round=s["sims_per_round"],
            n_posterior=s["n_posterior"],
            correction=s["correction"],
            truncation_mass=s["truncation_mass"],
            max_redraw_factor=s["max_redraw_factor"],
            hidden=t["hidden"],
            n_components=t["n_components"],
            full_cov=t["full_cov"],
            train=self.train(),
            seed=self["run"]["seed"],
        )

    def abc(self) -> AbcConfig:
        a = self["abc"]
        return AbcConfig(
            epsilon=a["epsilon"],
            epsilon_quantile=a["epsilon_quantile"],
            budget=a["budget"],
            pilot_size=a["pilot_size"],
            proposal_scale=a["proposal_scale"],
            chain_length=a["chain_length"],
            seed=self["run"]["seed"],
        )

    def mcmc(self) -> McmcConfig:
        m = self["mcmc"]
        return McmcConfig(
            n_samples=m["n_samples"],
            burn_in=m["burn_in"],
            thinning=m["thinning"],
            block_updates=m["block_updates"],
            branching_sampler=m["branching_sampler"],
            seed=self["run"]["seed"],
        )

    # persistence ----------------------------------------------------------

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            cp[section] = {k: self.text[section][k] for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())


def _set(values, text, section, key, raw):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        values[section][key] = parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    text[section][key] = raw.strip()


def load_config(path=None, overrides=(), text: str | None = None) -> RunConfig:
    """Defaults, then the file (or ``text``), then ``section.key=value`` overrides."""
    values = {s: {} for s in SCHEMA}
    texts = {s: {} for s in SCHEMA}
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            _set(values, texts, section, key, default)
    if path is not None or text is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            if text is not None:
                cp.read_string(text)
            else:
                with open(path) as fh:
                    cp.read_file(fh)
        except (configparser.Error, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        for section in cp.sections():
            for key, raw in cp[section].items():
                _set(values, texts, section, key, raw)
    for item in overrides:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        _set(values, texts, section, key, raw)
    cfg = RunConfig(values, texts)
    # surface constructor-level errors as configuration errors
    try:
        cfg.prior(), cfg.mask(), cfg.summary(), cfg.snpe(), cfg.abc(), cfg.mcmc()
        cfg.mask().check_prior(cfg.prior())
        cfg.sim()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if values["sim"]["method"] not in ("branching", "thinning"):
        raise ConfigError("[sim] method must be 'branching' or 'thinning'")
    return cfg
