import json
import warnings
from datetime import datetime

import numpy as np
import pytest

from etasbi.cli import main
from etasbi.config import ConfigError, load_config
from etasbi.core import Catalog, PosteriorSamples, Uniform
from etasbi.gibbs import LARGE_CATALOG
from etasbi.io import (
    DataError,
    EmptyCatalogWarning,
    append_jsonl,
    break_ties,
    read_catalog,
    read_jsonl,
    read_samples,
    read_scedc,
    write_catalog,
    write_samples,
)

from conftest import random_catalog

SCEDC = """\
#YYY/MM/DD HH:mm:SS.ss ET GT  MAG  M   LAT     LON     DEPTH Q EVID     NPH NGRM
1980/12/31 23:59:59.00 eq  l 3.10  l  34.000 -117.000   5.0 A 1000001  10  20
1981/01/01 00:00:00.00 eq  l 2.50  l  34.000 -117.000   5.0 A 1000002  10  20
1981/01/01 12:00:00.00 eq  l 2.40  l  34.000 -117.000   5.0 A 1000003  10  20
1981/01/02 00:00:00.00 eq  l 3.00  l  34.000 -117.000   5.0 A 1000004  10  20
1981/01/02 00:00:00.00 eq  l 2.70  l  34.000 -117.000   5.0 A 1000005  10  20
1981/01/03 06:59:60.00 eq  l 4.20  l  34.000 -117.000   5.0 A 1000006  10  20
1981/01/04 xx:00:00.00 eq  l 4.20  l  34.000 -117.000   5.0 A 1000007  10  20
2022/01/01 00:00:00.00 eq  l 5.00  l  34.000 -117.000   5.0 A 1000008  10  20
"""


class TestCatalogFiles:
    def test_round_trip_exact(self, tmp_path, rng):
        cat = random_catalog(rng, 300, T=123.456)
        write_catalog(tmp_path / "c.csv", cat, {"seed": 4})
        back, rep = read_catalog(tmp_path / "c.csv")
        np.testing.assert_array_equal(back.times, cat.times)
        np.testing.assert_array_equal(back.mags, cat.mags)
        assert back.window_end == cat.window_end and back.m0 == cat.m0
        assert rep.metadata["seed"] == "4"

    def test_m0_filter_and_ties(self, tmp_path):
        (tmp_path / "c.csv").write_text("time,magnitude\n2.0,3.5\n1.0,2.0\n2.0,4.0\n0.5,3.0\n")
        cat, rep = read_catalog(tmp_path / "c.csv", m0=3.0, window_end=5.0)
        assert rep.below_m0 == 1 and rep.ties_broken == 1
        np.testing.assert_allclose(cat.times, [0.5, 2.0, 2.0 + 1e-9])
        np.testing.assert_array_equal(cat.mags, [3.0, 3.5, 4.0])

    def test_timestamps(self, tmp_path):
        (tmp_path / "c.csv").write_text("time,magnitude\n2020-01-01T00:00:00,3.0\n2020-01-02T12:00:00,3.2\n")
        cat, rep = read_catalog(tmp_path / "c.csv", window_end=10.0)
        np.testing.assert_allclose(cat.times, [0.0, 1.5])
        assert rep.metadata["origin"].startswith("2020-01-01")

    @pytest.mark.parametrize(
        "body",
        [
            "t,m\n1.0,3.0\n",
            "time,magnitude\n1.0,abc\n",
            "time,magnitude\n1.0,3.0\n2020-01-01,3.0\n",
            "# window_end=2.0\ntime,magnitude\n1.0,3.0\n3.0,3.0\n",
            "",
        ],
    )
    def test_malformed(self, tmp_path, body):
        (tmp_path / "c.csv").write_text(body)
        with pytest.raises(DataError):
            read_catalog(tmp_path / "c.csv")

    def test_break_ties(self):
        t, n = break_ties(np.array([1.0, 1.0, 1.0, 2.0]))
        assert n == 2 and np.all(np.diff(t) > 0)


class TestScedc:
    def test_filters(self, tmp_path):
        (tmp_path / "s.txt").write_text(SCEDC)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cat, rep = read_scedc(tmp_path / "s.txt")
        # kept: 01/01 00:00 (2.5), 01/02 (3.0), 01/02 (2.7, tie), 01/03 07:00 (60 s row)
        assert cat.n == 4
        assert rep.below_m0 == 1 and rep.outside_window == 2 and rep.malformed == 1 and rep.ties_broken == 1
        np.testing.assert_allclose(cat.times, [0.0, 1.0, 1.0 + 1e-9, 2 + 7 / 24], atol=1e-12)
        assert cat.window_end == pytest.approx(cat.times[-1] + 1.0)
        assert cat.m0 == 2.5

    def test_end_is_exclusive(self, tmp_path):
        (tmp_path / "s.txt").write_text(SCEDC)
        cat, _ = read_scedc(tmp_path / "s.txt", end=datetime(2022, 1, 1, 0, 0, 1))
        assert cat.n == 5 and cat.mags[-1] == 5.0

    def test_empty_warns(self, tmp_path):
        (tmp_path / "s.txt").write_text(SCEDC)
        with pytest.warns(EmptyCatalogWarning):
            cat, _ = read_scedc(tmp_path / "s.txt", m_cut=9.0)
        assert cat.n == 0


class TestSamplesAndRecords:
    def test_samples_round_trip(self, tmp_path, rng):
        ps = PosteriorSamples(rng.normal(size=(40, 3)), ("mu", "k", "p"), "snpe", seed=3, round=15)
        write_samples(tmp_path / "s.csv", ps)
        back = read_samples(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.samples, ps.samples)
        assert (back.names, back.method, back.seed, back.round) == (ps.names, "snpe", 3, 15)

    def test_jsonl(self, tmp_path):
        append_jsonl(tmp_path / "r.jsonl", {"a": np.float64(1.5), "b": np.arange(2), "c": float("inf")})
        append_jsonl(tmp_path / "r.jsonl", {"a": 2})
        recs = read_jsonl(tmp_path / "r.jsonl")
        assert recs[0] == {"a": 1.5, "b": [0, 1], "c": "inf"} and recs[1]["a"] == 2


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg["snpe"]["rounds"] == 15 and cfg["snpe"]["sims_per_round"] == 2000
        assert cfg.prior().mu.lo == 0.05 and cfg.prior().subcritical
        assert cfg.sim().window_end == 10_000.0

    def test_file_and_overrides(self, tmp_path):
        (tmp_path / "c.ini").write_text("[snpe]\nrounds = 3\n[prior]\nmu = uniform(0.1, 0.3)\n")
        cfg = load_config(tmp_path / "c.ini", ["snpe.rounds=4", "model.fix=alpha=beta", "prior.subcritical=false"])
        assert cfg["snpe"]["rounds"] == 4
        assert isinstance(cfg.prior().mu, Uniform) and cfg.prior().mu.hi == 0.3
        assert cfg.mask().free_names == ("mu", "k", "c", "p")

    def test_dump_round_trip(self, tmp_path):
        cfg = load_config(overrides=["train.hidden=32, 16", "abc.epsilon=0.5"])
        cfg.write(tmp_path / "c.ini")
        again = load_config(tmp_path / "c.ini")
        assert again.values == cfg.values

    @pytest.mark.parametrize(
        "over",
        ["snpe.nope=1", "nosection.key=1", "snpe.rounds=many", "snpe.correction=magic", "sim.method=teleport",
         "prior.mu=cauchy(0, 1)", "bad-override", "model.fix=alpha=beta"],
    )
    def test_errors(self, over):
        with pytest.raises(ConfigError):
            load_config(overrides=[over])


class TestCli:
    def run(self, capsys, *argv):
        code = main([str(a) for a in argv])
        return code, capsys.readouterr()

    def test_simulate_summarize_mle(self, tmp_path, capsys):
        out = tmp_path / "sim"
        code, _ = self.run(capsys, "simulate", "--out", out, "--override", "sim.window_end=500", "--override",
                           "sim.n_catalogs=2", "--seed", 5)
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert [c["file"] for c in manifest["catalogs"]] == ["catalog_0000.csv", "catalog_0001.csv"]
        cat, _ = read_catalog(out / "catalog_0000.csv")
        assert cat.window_end == 500.0 and cat.n == manifest["catalogs"][0]["n_events"]

        code, io = self.run(capsys, "summarize", out / "catalog_0000.csv", out / "catalog_0001.csv", "--out", out)
        assert code == 0
        lines = (out / "summaries.csv").read_text().splitlines()
        assert len(lines) == 3 and len(lines[0].split(",")) == 40

        code, _ = self.run(capsys, "infer", "mle", "--catalog", out / "catalog_0000.csv", "--out", tmp_path / "mle")
        assert code == 0
        res = json.loads((tmp_path / "mle" / "mle.json").read_text())
        assert res["n_events"] == cat.n and res["params"]["mu"] > 0

    def test_simulate_reproducible(self, tmp_path, capsys):
        for d in ("a", "b"):
            self.run(capsys, "simulate", "--out", tmp_path / d, "--override", "sim.window_end=300")
        assert (tmp_path / "a" / "catalog_0000.csv").read_text() == (tmp_path / "b" / "catalog_0000.csv").read_text()

    def test_infer_gibbs_and_diagnose(self, tmp_path, capsys, small_catalog):
        write_catalog(tmp_path / "c.csv", small_catalog)
        for seed in (1, 2):
            code, _ = self.run(capsys, "infer", "gibbs", "--catalog", tmp_path / "c.csv", "--out", tmp_path / f"g{seed}",
                               "--seed", seed, "--override", "mcmc.n_samples=300", "--override", "mcmc.burn_in=300")
            assert code == 0
        a, b = tmp_path / "g1" / "samples.csv", tmp_path / "g2" / "samples.csv"
        assert read_samples(a).samples.shape == (300, 5)
        code, io = self.run(capsys, "diagnose", "mmd", "--samples", a, b, "--out", tmp_path / "d")
        assert code == 0 and "mmd" in io.out
        code, io = self.run(capsys, "diagnose", "compensator", "--samples", a, "--catalog", tmp_path / "c.csv",
                            "--out", tmp_path / "d")
        assert code == 0 and (tmp_path / "d" / "compensator.csv").exists()

    def test_infer_snpe_writes_rounds(self, tmp_path, capsys, small_catalog):
        write_catalog(tmp_path / "c.csv", small_catalog)
        code, _ = self.run(capsys, "infer", "snpe", "--catalog", tmp_path / "c.csv", "--out", tmp_path / "s",
                           "--override", "snpe.rounds=2", "--override", "snpe.sims_per_round=100",
                           "--override", "snpe.n_posterior=50", "--override", "train.max_epochs=5")
        assert code == 0
        recs = read_jsonl(tmp_path / "s" / "rounds.jsonl")
        assert [r["round"] for r in recs] == [1, 2]
        assert (tmp_path / "s" / "models" / "round_02.mdn").exists()
        assert (tmp_path / "s" / "rounds" / "round_01.csv").exists()

    def test_error_codes(self, tmp_path, capsys):
        code, io = self.run(capsys, "simulate", "--override", "snpe.nope=1", "--out", tmp_path)
        assert code == 2 and io.err.startswith("etasbi-error[2:config]")
        code, io = self.run(capsys, "infer", "mle", "--catalog", tmp_path / "missing.csv", "--out", tmp_path)
        assert code == 3 and io.err.startswith("etasbi-error[3:data]")
        code, io = self.run(capsys, "diagnose", "mmd", "--samples", tmp_path / "x.csv", "--out", tmp_path)
        assert code == 2

    def test_gibbs_guard(self, tmp_path, capsys):
        n = LARGE_CATALOG + 1
        cat = Catalog(np.linspace(1, n, n), np.full(n, 3.0), n + 1.0, 3.0)
        write_catalog(tmp_path / "big.csv", cat)
        code, io = self.run(capsys, "infer", "gibbs", "--catalog", tmp_path / "big.csv", "--out", tmp_path)
        assert code == 3 and "allow-large" in io.err

    def test_ingest(self, tmp_path, capsys):
        (tmp_path / "s.txt").write_text(SCEDC)
        code, io = self.run(capsys, "ingest", tmp_path / "s.txt", "--out", tmp_path / "i")
        assert code == 0 and "ingested 4 events" in io.out
        cat, rep = read_catalog(tmp_path / "i" / "catalog.csv")
        assert cat.n == 4 and cat.m0 == 2.5 and "origin" in rep.metadata
