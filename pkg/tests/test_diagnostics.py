import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from etasbi.core import EtasParams, FixedParamMask, PosteriorSamples
from etasbi.diagnostics import (
    C2stConfig,
    DegenerateSampleError,
    ImbalanceError,
    compensator_check,
    coverage,
    covered,
    c2st,
    interval_contains,
    mmd,
    summary_report,
)
from etasbi.simulate import SimConfig, simulate_branching

from conftest import TRUE


def naive_mmd(a, b, h):
    """Unbiased MMD^2 by explicit loops over pairs, on pre-standardized data."""
    k = lambda x, y: np.exp(-np.sum((x - y) ** 2) / (2 * h * h))
    m, n = len(a), len(b)
    saa = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    sbb = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sab = sum(k(a[i], b[j]) for i in range(m) for j in range(n)) / (m * n)
    return saa + sbb - 2 * sab


class TestMmd:
    def test_matches_naive(self, rng):
        a, b = rng.normal(size=(30, 2)), rng.normal(0.5, 1.2, size=(25, 2))
        pooled = np.vstack([a, b])
        mu, sd = pooled.mean(0), pooled.std(0)
        za, zb = (a - mu) / sd, (b - mu) / sd
        res = mmd(a, b, bandwidth=0.8)
        assert res.raw == pytest.approx(naive_mmd(za, zb, 0.8), abs=1e-12)

    def test_null_small_alternative_large(self):
        rng = np.random.default_rng(0)
        null = [mmd(rng.normal(size=(500, 3)), rng.normal(size=(500, 3))).raw for _ in range(5)]
        alt = mmd(rng.normal(size=(500, 3)), rng.normal(1.0, 1.0, size=(500, 3)))
        assert max(abs(v) for v in null) < 0.01
        assert alt.value > 0.1

    def test_affine_invariance(self, rng):
        a, b = rng.normal(size=(200, 2)), rng.normal(0.3, 1.0, size=(200, 2))
        scale, shift = np.array([100.0, 0.01]), np.array([-5.0, 7.0])
        assert mmd(a * scale + shift, b * scale + shift).raw == pytest.approx(mmd(a, b).raw, rel=1e-9)

    def test_value_clamped(self, rng):
        a = rng.normal(size=(50, 1))
        res = mmd(a, a.copy())
        assert res.raw < 0 and res.value == 0.0

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            mmd(rng.normal(size=(10, 2)), rng.normal(size=(10, 3)))
        with pytest.raises(DegenerateSampleError):
            mmd(np.ones((10, 2)), np.ones((10, 2)))

    @given(st.integers(0, 2**31 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(40, 2)), rng.normal(size=(30, 2))
        assert mmd(a, b).raw == pytest.approx(mmd(b, a).raw, abs=1e-12)


class TestC2st:
    def test_null_near_half(self):
        rng = np.random.default_rng(1)
        acc = c2st(rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2)))
        assert 0.44 <= acc <= 0.56

    def test_separated(self):
        rng = np.random.default_rng(2)
        acc = c2st(rng.normal(size=(500, 2)), rng.normal(6.0, 1.0, size=(500, 2)), C2stConfig(max_epochs=50))
        assert acc > 0.98

    def test_guards(self, rng):
        with pytest.raises(ImbalanceError):
            c2st(rng.normal(size=(500, 1)), rng.normal(size=(200, 1)))
        with pytest.raises(ValueError):
            c2st(rng.normal(size=(50, 1)), rng.normal(size=(50, 1)))


class TestCoverage:
    def test_covered_center_and_outside(self, rng):
        draws = rng.normal(size=(4000, 2))
        assert covered(draws, [0.0, 0.0], [0.05]).all()
        assert not covered(draws, [10.0, 0.0], [0.99]).any()

    def test_nested_levels(self, rng):
        draws = rng.normal(size=(2000, 3))
        levels = np.linspace(0.05, 0.95, 19)
        for _ in range(20):
            for mode in ("joint", "product"):
                hits = covered(draws, rng.normal(size=3), levels, mode)
                assert np.all(np.diff(hits.astype(int)) >= 0)

    def test_marginal_matches_equal_tailed(self, rng):
        draws = rng.normal(size=(4000, 2))
        for _ in range(30):
            t = rng.normal(size=2) * 1.5
            np.testing.assert_array_equal(covered(draws, t, [0.9], "marginal")[0], interval_contains(draws, t, 0.9))

    @pytest.mark.parametrize("mode", ["joint", "product", "marginal"])
    def test_exact_posterior_is_calibrated(self, mode):
        # conjugate Gaussian in 2-d: theta ~ N(0, I), x = theta + N(0, I)
        def replicate(rng):
            theta = rng.normal(size=2)
            return theta, theta + rng.normal(size=2)

        def runner(x, i):
            r = np.random.default_rng(10_000 + i)
            return x / 2 + np.sqrt(0.5) * r.normal(size=(1000, 2))

        rep = coverage(runner, replicate, 300, mode=mode, seed=3)
        lo, hi = rep.bounds(0.99)
        assert np.all((rep.coverage >= lo) & (rep.coverage <= hi)), rep.coverage
        assert set(rep.classify(0.99)) == {"calibrated"}

    def test_overconfident_detected(self):
        def replicate(rng):
            theta = rng.normal(size=1)
            return theta, theta + rng.normal(size=1)

        def runner(x, i):
            return x / 2 + 0.2 * np.random.default_rng(i).normal(size=(1000, 1))

        rep = coverage(runner, replicate, 200, seed=4)
        assert rep.classify()[rep.levels.tolist().index(0.8)] == "overconfident"

    def test_failures_counted(self):
        def runner(x, i):
            if i % 4 == 0:
                raise RuntimeError("boom")
            return np.random.default_rng(i).normal(size=(100, 1))

        rep = coverage(runner, lambda rng: (rng.normal(size=1), None), 20)
        assert rep.n_failed == 5 and rep.n_replicates == 15
        assert rep.to_csv().splitlines()[0].startswith("level,coverage")

    def test_bounds_binomial(self):
        rep = coverage(lambda x, i: np.zeros((10, 1)), lambda rng: (np.zeros(1), None), 50, levels=[0.5])
        lo, hi = rep.bounds(0.99)
        assert lo[0] == pytest.approx(16 / 50) and hi[0] == pytest.approx(34 / 50)

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            covered(np.zeros((5, 1)), [0.0], [0.5], "other")


class TestCompensator:
    def test_poisson_band(self):
        cat = simulate_branching(EtasParams(0.5, 0.0, 1.0, 0.5, 2.0, 2.4), SimConfig(200.0), np.random.default_rng(0)).catalog
        draws = np.tile([0.5, 0.0, 1.0, 0.5, 2.0], (20, 1))
        band = compensator_check(cat, draws, beta=2.4)
        np.testing.assert_allclose(band.mean, 0.5 * band.grid, atol=1e-12)
        assert band.observed[-1] == cat.n

    def test_true_params_track_counts(self, small_catalog):
        rng = np.random.default_rng(0)
        draws = TRUE.as_array() * rng.uniform(0.97, 1.03, size=(50, 5))
        ps = PosteriorSamples(draws, ("mu", "k", "alpha", "c", "p"), "test", meta={"beta": 2.4})
        band = compensator_check(small_catalog, ps, grid=[small_catalog.window_end])
        assert band.mean[0] == pytest.approx(small_catalog.n, rel=0.15)
        assert band.lo[0] <= band.mean[0] <= band.hi[0]
        assert band.to_csv().count("\n") == 2

    def test_masked_draws(self, small_catalog):
        mask = FixedParamMask({"alpha": "beta"})
        draws = np.tile([0.2, 0.2, 0.5, 2.0], (5, 1))
        band = compensator_check(small_catalog, draws, beta=2.4, mask=mask, names=mask.free_names)
        assert np.all(np.diff(band.mean) >= 0)


def test_summary_report():
    text = summary_report({"Run": {"seed": 0, "rounds": 15}, "Note": "ok"})
    assert "Run\n---\n" in text and "  seed    0" in text and "  ok" in text
