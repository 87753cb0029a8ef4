"""Covariance function checks against a high-precision Bessel oracle."""

import math

import mpmath
import numpy as np
import pytest

from frailtyboost.covariance import (
    CovarianceParams,
    cov_from_sqdists,
    cov_grad_from_sqdists,
    cov_matrix,
    cov_matrix_grad,
    matern,
)


def matern_reference(d, nu):
    # general Matern correlation through the modified Bessel function,
    # evaluated in high precision; independent of the closed forms under test
    if d == 0:
        return 1.0
    with mpmath.workdps(40):
        x = mpmath.sqrt(2 * nu) * d
        val = 2 ** (1 - nu) / mpmath.gamma(nu) * x**nu * mpmath.besselk(nu, x)
        return float(val)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_matches_bessel_reference(nu):
    ds = [1e-8, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 12.0]
    got = matern(np.array(ds), 1.0, nu)
    want = np.array([matern_reference(d, nu) for d in ds])
    assert np.allclose(got, want, rtol=1e-12, atol=1e-300)


def test_unit_distance_value():
    # reference value at d=1 for the default smoothness, from the oracle
    want = matern_reference(1.0, 1.5)
    assert abs(want - (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))) < 1e-15
    assert abs(matern(1.0, 1.0, 1.5) - want) < 1e-15


def test_variance_scaling_and_zero_distance():
    assert matern(0.0, 3.7, 1.5) == pytest.approx(3.7)
    assert matern(2.0, 2.0, 2.5) == pytest.approx(2.0 * matern(2.0, 1.0, 2.5))


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        matern(1.0, 1.0, 1.7)
    with pytest.raises(ValueError):
        matern(np.array([0.5, -0.1]), 1.0, 1.5)
    with pytest.raises(ValueError):
        CovarianceParams(sigma2=0.0, rho_s=1.0)
    with pytest.raises(ValueError):
        CovarianceParams(sigma2=1.0, rho_s=-2.0)
    with pytest.raises(ValueError):
        CovarianceParams(sigma2=1.0, rho_s=1.0, rho_t=float("nan"))
    with pytest.raises(ValueError):
        CovarianceParams(sigma2=1.0, rho_s=1.0, nu=2.0)


def test_log_vector_round_trip():
    p = CovarianceParams(sigma2=1.5, rho_s=0.25, rho_t=3.0)
    q = p.with_log_vector(p.to_log_vector())
    assert q.sigma2 == pytest.approx(p.sigma2)
    assert q.rho_s == pytest.approx(p.rho_s)
    assert q.rho_t == pytest.approx(p.rho_t)
    assert p.names() == ["sigma2", "rho_s", "rho_t"]

    ps = CovarianceParams(sigma2=2.0, rho_s=0.4)
    assert ps.names() == ["sigma2", "rho_s"]
    assert ps.with_log_vector(ps.to_log_vector()).rho_t is None
    with pytest.raises(ValueError):
        ps.with_log_vector(np.zeros(3))


def test_spatial_metric_ignores_time():
    p = CovarianceParams(sigma2=1.0, rho_s=0.5)
    a = np.array([[0.0, 0.1, 0.2]])
    b = np.array([[7.0, 0.1, 0.2]])
    c = cov_matrix(a, b, params=p)
    assert c[0, 0] == pytest.approx(1.0)


def test_spacetime_scaled_distance():
    p = CovarianceParams(sigma2=1.3, rho_s=0.5, rho_t=2.0, nu=2.5)
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.3, 0.4]])
    d = math.sqrt((1.0 / 2.0) ** 2 + (0.5 / 0.5) ** 2)
    want = 1.3 * matern_reference(d, 2.5)
    assert cov_matrix(a, b, params=p)[0, 0] == pytest.approx(want, rel=1e-12)


def test_symmetric_with_unit_diagonal_scale():
    p = CovarianceParams(sigma2=0.7, rho_s=0.3, rho_t=1.5)
    pts = np.random.default_rng(0).random((8, 3))
    c = cov_matrix(pts, params=p)
    assert np.allclose(c, c.T)
    assert np.allclose(np.diag(c), 0.7)
    # positive definite for distinct points
    assert np.linalg.eigvalsh(c).min() > 0


@pytest.mark.parametrize("mode", ["spatial", "spacetime"])
@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_gradients_match_finite_differences(mode, nu):
    rng = np.random.default_rng(42)
    t2 = rng.random((6, 6)) * 4.0
    s2 = rng.random((6, 6)) * 2.0
    s2[0, 0] = 0.0
    t2[0, 0] = 0.0  # include an exactly coincident pair
    if mode == "spatial":
        p = CovarianceParams(sigma2=1.4, rho_s=0.6, nu=nu)
    else:
        p = CovarianceParams(sigma2=1.4, rho_s=0.6, rho_t=2.5, nu=nu)
    c, grads = cov_grad_from_sqdists(t2, s2, p)
    assert np.allclose(c, cov_from_sqdists(t2, s2, p))
    logv = p.to_log_vector()
    h = 1e-6
    for k in range(logv.size):
        lp, lm = logv.copy(), logv.copy()
        lp[k] += h
        lm[k] -= h
        cp = cov_from_sqdists(t2, s2, p.with_log_vector(lp))
        cm = cov_from_sqdists(t2, s2, p.with_log_vector(lm))
        fd = (cp - cm) / (2 * h)
        assert np.allclose(grads[k], fd, rtol=1e-6, atol=1e-9), (mode, nu, k)


def test_cov_matrix_grad_shapes():
    p = CovarianceParams(sigma2=1.0, rho_s=0.4, rho_t=2.0)
    pts = np.random.default_rng(1).random((5, 3))
    c, grads = cov_matrix_grad(pts, params=p)
    assert c.shape == (5, 5)
    assert len(grads) == 3
    assert all(g.shape == (5, 5) for g in grads)
    # variance gradient in log sigma2 is the covariance itself
    assert np.allclose(grads[0], c)
