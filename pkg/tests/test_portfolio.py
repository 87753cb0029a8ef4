"""Portfolio loss simulation against enumerable and analytic oracles."""

import numpy as np
import pytest

from frailtyboost.covariance import CovarianceParams
from frailtyboost.models import fit_linear
from frailtyboost.portfolio import (
    LossDistribution,
    empirical_quantile,
    realized_loss,
    simulate_losses,
    summarize,
)
from frailtyboost.prediction import predict_default_probs
from frailtyboost.synthetic import SynthConfig, generate_synthetic

from test_models import bare_panel


def intercept_model(panel, logit):
    """Independent model with the intercept pinned to a chosen logit."""
    model = fit_linear(panel, "linear-independent")
    model.beta = np.array([float(logit)])
    return model


class TestLossDistribution:
    def test_validation(self):
        with pytest.raises(ValueError, match="nonempty"):
            LossDistribution(samples=np.array([]), seed=0)
        with pytest.raises(ValueError, match="nonempty"):
            LossDistribution(samples=np.zeros((2, 2)), seed=0)
        with pytest.raises(ValueError, match="nonnegative"):
            LossDistribution(samples=np.array([1.0, -0.5]), seed=0)

    def test_realized_loss(self):
        panel = bare_panel([0, 1, 0, 1])
        assert realized_loss(panel) == 2000.0


class TestEmpiricalQuantile:
    def test_order_statistic_convention(self):
        assert empirical_quantile([5.0], 0.5) == 5.0
        assert empirical_quantile([1.0, 2.0, 3.0, 4.0], 0.5) == 2.0
        assert empirical_quantile([1.0, 2.0, 3.0, 4.0], 0.0) == 1.0
        assert empirical_quantile([1.0, 2.0, 3.0, 4.0], 1.0) == 4.0
        assert empirical_quantile(np.arange(1.0, 101.0), 0.99) == 99.0
        assert empirical_quantile(np.arange(1.0, 102.0), 0.99) == 100.0

    def test_summarize(self):
        dist = LossDistribution(samples=np.full(50, 7.0), seed=3)
        s = summarize(dist)
        assert s == {"mean": 7.0, "q99": 7.0, "n_sims": 50, "seed": 3}


class TestIndependentSimulation:
    def test_certain_default_hits_total_balance(self):
        panel = bare_panel([0, 1, 0])
        model = intercept_model(panel, 40.0)
        dist = simulate_losses(model, panel, n_sims=500, seed=1)
        assert np.all(dist.samples == 3000.0)

    def test_certain_survival_is_zero(self):
        panel = bare_panel([0, 1, 0])
        model = intercept_model(panel, -40.0)
        dist = simulate_losses(model, panel, n_sims=500, seed=1)
        assert np.all(dist.samples == 0.0)

    def test_two_fair_loans_enumeration(self):
        panel = bare_panel([0, 1])
        model = intercept_model(panel, 0.0)  # p = 0.5 each
        n = 20_000
        dist = simulate_losses(model, panel, n_sims=n, seed=7)
        losses = dist.samples / 1000.0
        assert set(np.unique(losses)) <= {0.0, 1.0, 2.0}
        for k, p in [(0.0, 0.25), (1.0, 0.5), (2.0, 0.25)]:
            se = np.sqrt(p * (1 - p) / n)
            assert abs(np.mean(losses == k) - p) < 3 * se
        assert abs(losses.mean() - 1.0) < 3 * np.sqrt(0.5 / n)
        assert empirical_quantile(losses, 0.99) == 2.0

    def test_seed_determinism(self):
        panel = bare_panel([0, 1, 0, 1, 0])
        model = intercept_model(panel, -1.0)
        a = simulate_losses(model, panel, n_sims=400, seed=5)
        b = simulate_losses(model, panel, n_sims=400, seed=5)
        c = simulate_losses(model, panel, n_sims=400, seed=6)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_rejects_zero_sims(self):
        panel = bare_panel([0, 1])
        model = intercept_model(panel, 0.0)
        with pytest.raises(ValueError):
            simulate_losses(model, panel, n_sims=0)


class TestGPSimulation:
    def make_model(self, seed=0, n_loans=80, sigma2=0.8):
        cfg = SynthConfig(n_loans=n_loans, n_periods=3, seed=seed,
                          params=CovarianceParams(sigma2, 0.3, 2.0),
                          fixed_effects="linear", n_features=2,
                          base_rate=0.15)
        panel, _ = generate_synthetic(cfg)
        model = fit_linear(panel, "linear-spacetime", m=10,
                           fix_theta=CovarianceParams(sigma2, 0.3, 2.0))
        # score the final period cross-section
        last = panel.filter_periods(panel.year.max(), panel.year.max())
        return model, last

    def test_mean_matches_marginal_probabilities(self):
        # E[loss] = sum balance * E[p]; the marginal quadrature probability
        # and the joint Monte Carlo mean must agree up to MC error
        model, cross = self.make_model(seed=2)
        n = 40_000
        dist = simulate_losses(model, cross, n_sims=n, seed=11)
        p_bar = predict_default_probs(model, cross)
        expect = float(np.sum(cross.balance * p_bar))
        mc_se = dist.samples.std() / np.sqrt(n)
        assert abs(dist.samples.mean() - expect) < 4 * mc_se

    def test_gp_seed_determinism(self):
        model, cross = self.make_model(seed=3)
        a = simulate_losses(model, cross, n_sims=300, seed=9)
        b = simulate_losses(model, cross, n_sims=300, seed=9)
        c = simulate_losses(model, cross, n_sims=300, seed=10)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_shared_frailty_fattens_the_tail(self):
        # all loans at one site share one latent draw; the correlated tail
        # quantile must exceed that of independent Bernoullis with the same
        # marginal probabilities
        cfg = SynthConfig(n_loans=60, n_periods=3, seed=4,
                          params=CovarianceParams(1.5, 0.3, 2.0),
                          fixed_effects="linear", n_features=2,
                          base_rate=0.15)
        panel, _ = generate_synthetic(cfg)
        # collapse every loan onto one site: the latent index then has one
        # point per period and all loans share its draw
        panel.lon[:] = 0.5
        panel.lat[:] = 0.5
        model = fit_linear(panel, "linear-spacetime", m=5,
                           fix_theta=CovarianceParams(1.5, 0.3, 2.0))
        cross = panel.filter_periods(panel.year.max(), panel.year.max())
        n = 30_000
        dist = simulate_losses(model, cross, n_sims=n, seed=13)
        q_gp = empirical_quantile(dist.samples, 0.99)

        p_bar = predict_default_probs(model, cross)
        rng = np.random.default_rng(99)
        u = rng.random((n, p_bar.size))
        indep = (u < p_bar[None, :]) @ np.asarray(cross.balance, dtype=float)
        q_ind = empirical_quantile(indep, 0.99)
        assert q_gp > q_ind
