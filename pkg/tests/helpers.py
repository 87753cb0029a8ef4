"""Shared generators for the test suite: small random latent problems."""

import numpy as np

from frailtyboost.covariance import CovarianceParams
from frailtyboost.hazard import sigmoid
from frailtyboost.vecchia import LatentField, build_vecchia, order_points, select_neighbors


def random_points(n, seed=0, n_times=4):
    """Random latent coordinates (t, x, y) with integer times."""
    rng = np.random.default_rng(seed)
    t = rng.integers(0, n_times, n).astype(float)
    xy = rng.random((n, 2))
    return np.c_[t, xy]


def default_params(mode="spacetime", sigma2=1.0, rho_s=0.3, rho_t=2.0, nu=1.5):
    if mode == "spatial":
        return CovarianceParams(sigma2=sigma2, rho_s=rho_s, nu=nu)
    return CovarianceParams(sigma2=sigma2, rho_s=rho_s, rho_t=rho_t, nu=nu)


def small_structure(n=20, m=5, mode="spacetime", seed=0, params=None, want_grad=False):
    """A built Vecchia structure on random points plus its inputs."""
    params = params or default_params(mode)
    pts = random_points(n, seed=seed)
    if mode == "spatial":
        pts[:, 0] = 0.0
    order = order_points(pts, mode, rng=seed)
    metric = "euclidean" if mode == "spatial" else "correlation"
    nbr = select_neighbors(pts, order, m, metric=metric, params=params)
    struct = build_vecchia(pts, order, nbr, params, want_grad=want_grad)
    return struct, pts, order, nbr, params


def latent_problem(n_obs=120, n_b=15, m=6, mode="spacetime", seed=0, params=None,
                   intercept=-1.0, want_grad=False):
    """Random Bernoulli observations tied to a small latent field.

    Returns (struct, lat_idx, y, F, field) with lat_idx in ordered indexing.
    """
    params = params or default_params(mode)
    rng = np.random.default_rng(seed + 1000)
    pts = random_points(n_b, seed=seed)
    if mode == "spatial":
        pts[:, 0] = 0.0
    field = LatentField.build(pts, params, mode, m, rng=seed)
    struct = field.structure(want_grad=want_grad)
    # every latent point gets at least one observation
    lat_idx = np.concatenate([np.arange(n_b), rng.integers(0, n_b, n_obs - n_b)])
    F = intercept + 0.8 * rng.normal(size=n_obs)
    from scipy.linalg import cholesky

    cov = struct.implied_cov_dense()
    b_true = cholesky(cov, lower=True) @ rng.normal(size=n_b)
    y = (rng.random(n_obs) < sigmoid(F + b_true[lat_idx])).astype(float)
    if y.sum() == 0:
        y[0] = 1.0
    if y.sum() == n_obs:
        y[0] = 0.0
    return struct, lat_idx, y, F, field
