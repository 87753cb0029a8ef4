"""Discrete-time hazard observation model.

Each loan-period observation is a Bernoulli draw: conditional on having
survived to period t, the loan defaults with probability
sigmoid(F(x) + b), where F is the fixed-effects predictor and b the latent
effect at the observation's time/location.  These helpers evaluate the
log-likelihood and its first two derivatives in the predictor, written to
stay finite for extreme predictor values.
"""

import numpy as np
from scipy.special import expit


def sigmoid(eta):
    """Logistic link, numerically stable for large |eta|."""
    return expit(eta)


def bernoulli_loglik(y, eta):
    """Sum of Bernoulli log-likelihoods at logits eta.

    Uses log(sigmoid(eta)) = -log(1 + exp(-eta)) directly instead of going
    through the probability, so eta of order +-40 still gives finite terms.
    """
    y = np.asarray(y)
    eta = np.asarray(eta, dtype=float)
    sign = np.where(y > 0, 1.0, -1.0)
    return -np.sum(np.logaddexp(0.0, -sign * eta))


def bernoulli_d1(y, eta):
    """First derivative of the per-observation log-likelihood: y - p."""
    return np.asarray(y, dtype=float) - expit(eta)


def bernoulli_weights(eta):
    """Negative second derivative p * (1 - p), the curvature weights."""
    p = expit(eta)
    return p * (1.0 - p)


def weights_deriv(eta):
    """Derivative of the curvature weights: p (1 - p) (1 - 2 p)."""
    p = expit(eta)
    return p * (1.0 - p) * (1.0 - 2.0 * p)
