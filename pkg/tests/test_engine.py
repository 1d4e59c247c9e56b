import numpy as np
import pytest
from scipy import stats

from etasbi.core import synthetic_prior
from etasbi.engine import (
    AbcConfig,
    SimulationBudgetError,
    SnpeConfig,
    StuckChainWarning,
    abc_mcmc,
    abc_pilot,
    abc_rejection,
    mad_scale,
    snpe_run,
)
from etasbi.nde import TrainConfig
from etasbi.simulate import SimConfig
from etasbi.tasks import BoxTask, EtasTask, ExpHawkesTask, GaussianToyTask

TOY = GaussianToyTask()
FAST_TRAIN = TrainConfig(max_epochs=200)


def mixture_mean(model, s):
    pi, means, _ = model.mixture(np.atleast_2d(s))
    z = (pi[0][:, None] * means[0]).sum(axis=0)
    return model.destandardize_theta(z)[0]


class FlakyToy(GaussianToyTask):
    """Gaussian toy whose simulator fails a fixed fraction of the time."""

    def __init__(self, fail=0.2):
        super().__init__()
        self.fail = fail

    def simulate(self, theta, rng):
        if rng.random() < self.fail:
            return None
        return super().simulate(theta, rng)


class PermutedToy(GaussianToyTask):
    def __init__(self, perm):
        super().__init__(dim=1)
        self.perm = np.asarray(perm)

    def simulate(self, theta, rng):
        base = super().simulate(theta, rng)
        # three noisy copies of the same statistic, in a fixed order
        s = np.concatenate([base, base + rng.normal(size=1), 2 * base])
        return s[self.perm]


class TestSnpeConfig:
    @pytest.mark.parametrize(
        "kwargs", [dict(rounds=0), dict(sims_per_round=10), dict(n_posterior=0), dict(correction="magic")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SnpeConfig(**kwargs)


class TestSnpeToy:
    def test_single_round_mean(self):
        r = snpe_run(TOY, [0.8], SnpeConfig(rounds=1, sims_per_round=8000, n_posterior=20_000, correction="none"))
        mean, var = TOY.posterior(0.8)
        assert r.samples.samples.mean() == pytest.approx(mean, abs=0.05)
        assert r.samples.samples.var() == pytest.approx(var, rel=0.2)

    def test_error_halves_when_L_quadruples(self):
        grid = np.linspace(-1.5, 1.5, 7)

        def rms(L):
            errs = []
            for seed in range(6):
                cfg = SnpeConfig(rounds=1, sims_per_round=L, n_posterior=10, correction="none", seed=seed)
                model = snpe_run(TOY, [0.5], cfg).models[0]
                errs += [mixture_mean(model, [s])[0] - s / 2 for s in grid]
            return np.sqrt(np.mean(np.square(errs)))

        ratio = rms(4000) / rms(1000)
        assert 0.35 <= ratio <= 0.7, ratio

    @pytest.mark.parametrize("correction", ["truncated", "importance"])
    def test_sequential_modes(self, correction):
        cfg = SnpeConfig(rounds=3, sims_per_round=1500, n_posterior=20_000, correction=correction, train=FAST_TRAIN)
        r = snpe_run(TOY, [1.4], cfg)
        mean, var = TOY.posterior(1.4)
        # importance weights have heavy tails, so that mode gets a looser bound
        tol = 0.1 if correction == "importance" else 0.07
        assert r.samples.samples.mean() == pytest.approx(mean, abs=tol)
        assert r.samples.samples.var() == pytest.approx(var, rel=0.3)
        sizes = [rec.dataset_size for rec in r.records]
        assert sizes == [1500, 3000, 4500]
        if correction == "importance":
            for k in (2, 3):
                w = r.weights[r.round_index == k]
                assert w.mean() == pytest.approx(1.0)
                assert w.max() <= np.percentile(w, 99.5) * (1 + 1e-12) or np.sum(w == w.max()) > 1
        else:
            assert np.all(r.weights == 1.0)
            lo, hi = r.records[2].box_lo[0], r.records[2].box_hi[0]
            u3 = r.theta_u[r.round_index == 3, 0]
            assert u3.min() >= lo and u3.max() <= hi

    def test_reproducible(self):
        cfg = SnpeConfig(rounds=2, sims_per_round=200, n_posterior=300, train=TrainConfig(max_epochs=20))
        a = snpe_run(TOY, [0.3], cfg)
        b = snpe_run(TOY, [0.3], cfg)
        np.testing.assert_array_equal(a.samples.samples, b.samples.samples)
        c = snpe_run(TOY, [0.3], SnpeConfig(rounds=2, sims_per_round=200, n_posterior=300,
                                           train=TrainConfig(max_epochs=20), seed=1))
        assert not np.array_equal(a.samples.samples, c.samples.samples)

    def test_samples_in_prior_support(self):
        task = BoxTask([0.0, 1.0], [1.0, 3.0], ("a", "b"))
        task.simulate = lambda theta, rng: np.asarray(theta) + rng.normal(0, 0.3, 2)
        r = snpe_run(task, [0.95, 1.1], SnpeConfig(rounds=2, sims_per_round=500, n_posterior=2000,
                                                  train=TrainConfig(max_epochs=50)))
        assert np.all(np.isfinite(task.log_prior(r.samples.samples)))

    def test_failure_accounting(self):
        cfg = SnpeConfig(rounds=2, sims_per_round=300, n_posterior=100, train=TrainConfig(max_epochs=20))
        r = snpe_run(FlakyToy(0.2), [0.0], cfg)
        for rec in r.records:
            assert rec.successes + rec.failures == rec.attempts
            assert rec.failures > 0
            assert rec.attempts - rec.failures >= rec.n_new
        assert r.theta_u.shape[0] == 600

    def test_failure_cap(self):
        cfg = SnpeConfig(rounds=1, sims_per_round=50, max_redraw_factor=1)
        with pytest.raises(SimulationBudgetError):
            snpe_run(FlakyToy(1.0), [0.0], cfg)

    def test_round_records_serialize(self):
        import json

        cfg = SnpeConfig(rounds=2, sims_per_round=100, n_posterior=50, train=TrainConfig(max_epochs=5))
        r = snpe_run(TOY, [0.0], cfg)
        rec = json.loads(json.dumps(r.records[1].to_json()))
        assert rec["round"] == 2 and rec["dataset_size"] == 200
        assert r.round_samples(1, 40).samples.shape == (40, 1)


class TestEtasSmoke:
    def test_short_run(self):
        task = EtasTask(synthetic_prior(), 2.4, SimConfig(300.0))
        from etasbi.core import EtasParams
        from etasbi.simulate import simulate_branching

        obs = simulate_branching(EtasParams(0.2, 0.2, 1.5, 0.5, 2.0, 2.4), SimConfig(300.0), np.random.default_rng(0))
        cfg = SnpeConfig(rounds=2, sims_per_round=100, n_posterior=200, train=TrainConfig(max_epochs=10))
        r = snpe_run(task, task.observe(obs.catalog), cfg)
        assert r.samples.samples.shape == (200, 5)
        assert np.all(np.isfinite(task.log_prior(r.samples.samples)))


class TestAbc:
    def test_mad_scale(self):
        S = np.array([[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]])
        np.testing.assert_allclose(mad_scale(S), [1.0, 1.0])

    def test_infinite_epsilon_recovers_prior(self):
        r = abc_rejection(TOY, [2.0], AbcConfig(epsilon=np.inf, budget=3000, pilot_size=50))
        assert r.samples.shape[0] == 3000
        assert stats.kstest(r.samples[:, 0], "norm").pvalue > 0.01

    def test_nested_acceptance(self):
        pilot = abc_pilot(TOY, [0.5], AbcConfig(pilot_size=200))
        rates, sets = [], []
        for eps in (2.0, 1.0, 0.5, 0.1):
            r = abc_rejection(TOY, [0.5], AbcConfig(epsilon=eps, budget=2000, pilot_size=200))
            rates.append(r.meta["acceptance_rate"])
            sets.append({tuple(x) for x in r.samples})
        assert rates == sorted(rates, reverse=True)
        for big, small in zip(sets, sets[1:]):
            assert small <= big

    def test_abc_inflation(self):
        _, var = TOY.posterior(0.0)
        variances = []
        for eps in (1.0, 0.3, 0.05):
            r = abc_rejection(TOY, [0.0], AbcConfig(epsilon=eps, budget=20_000, pilot_size=200))
            variances.append(r.samples[:, 0].var())
        assert variances[0] > variances[1] > var
        assert variances[2] == pytest.approx(var, rel=0.2)

    def test_epsilon_from_pilot_quantile(self):
        p = abc_pilot(TOY, [0.0], AbcConfig(pilot_size=400, epsilon_quantile=0.1))
        assert p.epsilon == pytest.approx(np.quantile(p.distances, 0.1))

    def test_mcmc_prior_only(self):
        cfg = AbcConfig(epsilon=np.inf, budget=1, chain_length=40_000, pilot_size=100)
        r = abc_mcmc(TOY, [0.0], cfg)
        x = r.samples[::40, 0]
        assert stats.kstest(x, "norm").pvalue > 0.01

    def test_mcmc_targets_posterior(self):
        r = abc_mcmc(TOY, [1.0], AbcConfig(epsilon=0.15, chain_length=30_000, pilot_size=300))
        mean, var = TOY.posterior(1.0)
        assert r.samples[5000:, 0].mean() == pytest.approx(mean, abs=0.1)

    def test_relabel_invariance(self):
        s = np.array([0.4, 0.1, 0.8])
        a = abc_mcmc(PermutedToy([0, 1, 2]), s, AbcConfig(chain_length=2000, pilot_size=200))
        perm = [2, 0, 1]
        b = abc_mcmc(PermutedToy(perm), s[perm], AbcConfig(chain_length=2000, pilot_size=200))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_stuck_warning(self):
        cfg = AbcConfig(epsilon=1e-4, budget=200_000, chain_length=1000, stuck_window=500, pilot_size=50,
                        proposal_scale=5.0)
        with pytest.warns(StuckChainWarning):
            abc_mcmc(TOY, [0.0], cfg)

    def test_reproducible(self):
        cfg = AbcConfig(budget=500, pilot_size=100, epsilon_quantile=0.2)
        np.testing.assert_array_equal(abc_rejection(TOY, [0.2], cfg).samples, abc_rejection(TOY, [0.2], cfg).samples)
        cfg = AbcConfig(chain_length=500, pilot_size=100, epsilon_quantile=0.2)
        np.testing.assert_array_equal(abc_mcmc(TOY, [0.2], cfg).samples, abc_mcmc(TOY, [0.2], cfg).samples)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AbcConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            AbcConfig(budget=0)


def test_abc_broader_than_snpe_on_hawkes():
    """ABC-MCMC is less confident than SNPE given the same summaries and budget."""
    task = ExpHawkesTask(window_end=1000.0)
    truth = np.array([0.3, 0.5, 1.0])
    s_obs = task.simulate(truth, np.random.default_rng(42))
    budget = 3000
    snpe = snpe_run(task, s_obs, SnpeConfig(rounds=3, sims_per_round=budget // 3, n_posterior=5000))
    abc = abc_mcmc(task, s_obs, AbcConfig(budget=budget, pilot_size=500, epsilon_quantile=0.05))
    ratio = abc.samples.var(axis=0) / snpe.samples.samples.var(axis=0)
    print("ABC-MCMC / SNPE variance ratio:", ratio)
    assert np.all(ratio > 1), ratio
