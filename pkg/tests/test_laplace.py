"""Laplace approximation against brute-force integration and FD oracles."""

import warnings

import numpy as np
import pytest

from frailtyboost.hazard import bernoulli_loglik, sigmoid
from frailtyboost.laplace import (
    find_mode,
    grad_covparams,
    grad_fixed_effects,
    marginal_loglik,
    optimize_covparams,
)
from frailtyboost.vecchia import LatentField, build_vecchia

from helpers import default_params, latent_problem, random_points


def brute_force_marginal(struct, lat_idx, y, F, nodes=60):
    """Log marginal likelihood by tensor-product Gauss-Hermite quadrature
    over the prior implied by the Vecchia structure (tiny latent dims only).
    """
    n_b = struct.n
    assert n_b <= 3
    cov = struct.implied_cov_dense()
    L = np.linalg.cholesky(cov)
    xs, ws = np.polynomial.hermite_e.hermegauss(nodes)
    logw = np.log(ws) - 0.5 * np.log(2 * np.pi)
    grids = np.meshgrid(*([xs] * n_b), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=1)  # (G, n_b) std normals
    logW = np.zeros(Z.shape[0])
    for d in range(n_b):
        idx = np.meshgrid(*([np.arange(nodes)] * n_b), indexing="ij")[d].ravel()
        logW += logw[idx]
    B = Z @ L.T
    eta = F[None, :] + B[:, lat_idx]
    ll = np.sum(
        np.where(y[None, :] > 0, -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta)),
        axis=1,
    )
    from scipy.special import logsumexp

    return float(logsumexp(logW + ll))


class TestModeSearch:
    def test_mode_solves_stationarity(self):
        struct, lat_idx, y, F, _ = latent_problem(n_obs=200, n_b=20, seed=0)
        res = find_mode(struct, lat_idx, y, F)
        assert res.converged
        # stationarity: aggregated score equals Q b at the mode
        eta = F + res.b[lat_idx]
        score = np.bincount(lat_idx, weights=y - sigmoid(eta), minlength=20)
        assert np.abs(score - struct.precision() @ res.b).max() < 1e-6

    def test_warm_start_converges_immediately(self):
        struct, lat_idx, y, F, _ = latent_problem(n_obs=150, n_b=15, seed=1)
        res = find_mode(struct, lat_idx, y, F)
        res2 = find_mode(struct, lat_idx, y, F, b0=res.b)
        assert res2.n_iter <= 2
        assert res2.marginal == pytest.approx(res.marginal, abs=1e-10)

    def test_mode_maximizes_penalized_loglik(self):
        struct, lat_idx, y, F, _ = latent_problem(n_obs=100, n_b=12, seed=2)
        res = find_mode(struct, lat_idx, y, F)
        rng = np.random.default_rng(3)
        for _ in range(5):
            alt = res.b + rng.normal(size=12) * 0.1
            eta = F + alt[lat_idx]
            psi_alt = bernoulli_loglik(y, eta) - 0.5 * struct.quad_form(alt)
            assert psi_alt <= res.penalized_loglik + 1e-10

    def test_nonconvergence_warns(self):
        struct, lat_idx, y, F, _ = latent_problem(n_obs=300, n_b=25, seed=3)
        with pytest.warns(UserWarning, match="did not converge"):
            res = find_mode(struct, lat_idx, y, F, max_iter=1)
        assert not res.converged


class TestMarginalOracle:
    @pytest.mark.parametrize("seed,n_b", [(0, 2), (1, 3), (2, 3)])
    def test_matches_brute_force_integration(self, seed, n_b):
        # dense numbers of observations per latent point keep the Laplace
        # error well below the comparison tolerance
        rng = np.random.default_rng(seed)
        n_obs = 120 * n_b
        params = default_params("spacetime", sigma2=0.6)
        pts = random_points(n_b, seed=seed)
        field = LatentField.build(pts, params, "spacetime", m=n_b - 1, rng=seed)
        struct = field.structure()
        lat_idx = np.concatenate([np.arange(n_b), rng.integers(0, n_b, n_obs - n_b)])
        F = -1.2 + 0.7 * rng.normal(size=n_obs)
        cov = struct.implied_cov_dense()
        b_true = np.linalg.cholesky(cov) @ rng.normal(size=n_b)
        y = (rng.random(n_obs) < sigmoid(F + b_true[lat_idx])).astype(float)
        want = brute_force_marginal(struct, lat_idx, y, F, nodes=60)
        got = marginal_loglik(struct, lat_idx, y, F)
        assert got == pytest.approx(want, rel=1e-3)

    def test_degenerate_prior_reduces_to_independent(self):
        struct, lat_idx, y, F, field = latent_problem(
            n_obs=150,
            n_b=15,
            seed=4,
            params=default_params("spacetime", sigma2=1e-10),
        )
        res = find_mode(struct, lat_idx, y, F)
        want = bernoulli_loglik(y, F)
        assert res.marginal == pytest.approx(want, rel=1e-6)
        assert np.abs(res.b).max() < 1e-4


class TestGradients:
    @pytest.mark.parametrize("mode", ["spatial", "spacetime"])
    def test_fixed_effect_grad_matches_fd(self, mode):
        struct, lat_idx, y, F, _ = latent_problem(n_obs=60, n_b=10, seed=5, mode=mode)
        res = find_mode(struct, lat_idx, y, F, tol=1e-11)
        g = grad_fixed_effects(struct, lat_idx, y, F, res)
        h = 1e-5
        rng = np.random.default_rng(6)
        for j in rng.choice(60, size=12, replace=False):
            Fp, Fm = F.copy(), F.copy()
            Fp[j] += h
            Fm[j] -= h
            fd = (
                marginal_loglik(struct, lat_idx, y, Fp, tol=1e-11)
                - marginal_loglik(struct, lat_idx, y, Fm, tol=1e-11)
            ) / (2 * h)
            assert g[j] == pytest.approx(fd, rel=2e-5, abs=1e-8)

    @pytest.mark.parametrize("mode", ["spatial", "spacetime"])
    def test_covparam_grad_matches_fd(self, mode):
        struct, lat_idx, y, F, field = latent_problem(
            n_obs=90, n_b=12, seed=7, mode=mode, want_grad=True
        )
        res = find_mode(struct, lat_idx, y, F, tol=1e-11)
        g = grad_covparams(struct, lat_idx, y, F, res)
        params = struct.params
        logv = params.to_log_vector()
        h = 1e-5
        for k in range(logv.size):
            lp, lm = logv.copy(), logv.copy()
            lp[k] += h
            lm[k] -= h
            sp = build_vecchia(struct.points, struct.order, struct.nbr, params.with_log_vector(lp))
            sm = build_vecchia(struct.points, struct.order, struct.nbr, params.with_log_vector(lm))
            fd = (
                marginal_loglik(sp, lat_idx, y, F, tol=1e-11)
                - marginal_loglik(sm, lat_idx, y, F, tol=1e-11)
            ) / (2 * h)
            assert g[k] == pytest.approx(fd, rel=2e-5, abs=1e-8)

    def test_sparse_path_matches_dense(self):
        struct, lat_idx, y, F, _ = latent_problem(
            n_obs=400, n_b=60, m=8, seed=8, want_grad=True
        )
        res_d = find_mode(struct, lat_idx, y, F, dense_cutoff=10_000)
        res_s = find_mode(struct, lat_idx, y, F, dense_cutoff=0)
        assert res_s.marginal == pytest.approx(res_d.marginal, abs=1e-8)
        gF_d = grad_fixed_effects(struct, lat_idx, y, F, res_d)
        gF_s = grad_fixed_effects(struct, lat_idx, y, F, res_s)
        assert np.abs(gF_d - gF_s).max() < 1e-9
        gt_d = grad_covparams(struct, lat_idx, y, F, res_d)
        gt_s = grad_covparams(struct, lat_idx, y, F, res_s)
        assert np.abs(gt_d - gt_s).max() < 1e-9


class TestOptimizer:
    @pytest.mark.parametrize("method", ["lbfgs", "nesterov"])
    def test_improves_objective(self, method):
        start = default_params("spacetime", sigma2=0.3, rho_s=0.15, rho_t=1.0)
        struct, lat_idx, y, F, field = latent_problem(
            n_obs=400, n_b=40, m=6, seed=9, params=start
        )
        before = marginal_loglik(field.structure(), lat_idx, y, F)
        info = optimize_covparams(field, lat_idx, y, F, method=method, max_steps=12)
        after = marginal_loglik(field.structure(), lat_idx, y, F)
        assert after >= before - 1e-9
        assert info["objective"] == pytest.approx(after, abs=1e-6)
        assert field.opt_iterations > 0

    def test_counter_accumulates_across_calls(self):
        struct, lat_idx, y, F, field = latent_problem(n_obs=200, n_b=20, seed=10)
        optimize_covparams(field, lat_idx, y, F, max_steps=3)
        c1 = field.opt_iterations
        optimize_covparams(field, lat_idx, y, F, max_steps=3)
        assert field.opt_iterations > c1
