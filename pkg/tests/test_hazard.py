"""Observation model: stability and derivative checks."""

import numpy as np
import pytest

from frailtyboost.hazard import (
    bernoulli_d1,
    bernoulli_loglik,
    bernoulli_weights,
    sigmoid,
    weights_deriv,
)


def test_loglik_matches_direct_formula():
    rng = np.random.default_rng(0)
    eta = rng.normal(size=50) * 2
    y = (rng.random(50) < 0.4).astype(float)
    p = 1 / (1 + np.exp(-eta))
    want = np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bernoulli_loglik(y, eta) == pytest.approx(want, rel=1e-12)


def test_loglik_extreme_logits_finite():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    eta = np.array([500.0, -500.0, -500.0, 500.0])
    ll = bernoulli_loglik(y, eta)
    assert np.isfinite(ll)
    # the two well-classified terms contribute ~0, the two others ~-500
    assert ll == pytest.approx(-1000.0, rel=1e-12)


def test_sigmoid_saturates_cleanly():
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0
    assert sigmoid(0.0) == 0.5


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(1)
    eta = rng.normal(size=20) * 3
    y = (rng.random(20) < 0.5).astype(float)
    h = 1e-6

    def ll(e):
        return bernoulli_loglik(y, e)

    for j in range(20):
        ep, em = eta.copy(), eta.copy()
        ep[j] += h
        em[j] -= h
        fd1 = (ll(ep) - ll(em)) / (2 * h)
        assert bernoulli_d1(y, eta)[j] == pytest.approx(fd1, abs=1e-8)
        fd2 = (bernoulli_d1(y, ep)[j] - bernoulli_d1(y, em)[j]) / (2 * h)
        assert -bernoulli_weights(eta)[j] == pytest.approx(fd2, abs=1e-8)


def test_weights_deriv_matches_fd():
    eta = np.linspace(-4, 4, 33)
    h = 1e-6
    fd = (bernoulli_weights(eta + h) - bernoulli_weights(eta - h)) / (2 * h)
    assert np.allclose(weights_deriv(eta), fd, atol=1e-9)


def test_weights_positive():
    eta = np.array([-700.0, -30.0, 0.0, 30.0, 700.0])
    w = bernoulli_weights(eta)
    assert np.all(w >= 0)
    assert w[2] == pytest.approx(0.25)
