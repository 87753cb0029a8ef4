"""Matern covariance functions for spatial and space-time latent effects.

Only the half-integer smoothness values 0.5, 1.5 and 2.5 are supported,
where the Matern correlation has a closed form.  Distances are anisotropic:
time and space get separate range parameters, so for points u = (t, x, y)
the scaled distance is

    d(u, v) = sqrt(((t_u - t_v) / rho_t)^2 + (|s_u - s_v| / rho_s)^2)

and a pure spatial model drops the time term.  Gradients are taken with
respect to the logs of the parameters, which is also how the optimizer
parameterizes them.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

_SUPPORTED_NU = (0.5, 1.5, 2.5)

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class CovarianceParams:
    """Marginal variance and range parameters of the latent Gaussian process.

    ``rho_t`` is None for purely spatial models; the covariance then ignores
    the time coordinate entirely.  ``nu`` must be one of 0.5, 1.5, 2.5.
    """

    sigma2: float
    rho_s: float
    rho_t: float | None = None
    nu: float = 1.5

    def __post_init__(self):
        if self.nu not in _SUPPORTED_NU:
            raise ValueError(f"nu must be one of {_SUPPORTED_NU}, got {self.nu}")
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be positive and finite, got {self.sigma2}")
        if not (self.rho_s > 0 and np.isfinite(self.rho_s)):
            raise ValueError(f"rho_s must be positive and finite, got {self.rho_s}")
        if self.rho_t is not None and not (self.rho_t > 0 and np.isfinite(self.rho_t)):
            raise ValueError(f"rho_t must be positive and finite, got {self.rho_t}")

    @property
    def spatial_only(self):
        return self.rho_t is None

    def names(self):
        """Names of the free parameters, in optimizer order."""
        if self.spatial_only:
            return ["sigma2", "rho_s"]
        return ["sigma2", "rho_s", "rho_t"]

    def to_log_vector(self):
        """Free parameters as a vector of logs, in ``names()`` order."""
        vals = [self.sigma2, self.rho_s] + ([] if self.spatial_only else [self.rho_t])
        return np.log(np.asarray(vals, dtype=float))

    def with_log_vector(self, logv):
        """New params with the same nu, values taken from a log-vector."""
        logv = np.asarray(logv, dtype=float)
        n = 2 if self.spatial_only else 3
        if logv.shape != (n,):
            raise ValueError(f"expected log vector of length {n}, got shape {logv.shape}")
        vals = np.exp(logv)
        rho_t = None if self.spatial_only else float(vals[2])
        return replace(self, sigma2=float(vals[0]), rho_s=float(vals[1]), rho_t=rho_t)


def _g(d, nu):
    # Matern correlation at scaled distance d >= 0, half-integer closed forms.
    if nu == 0.5:
        return np.exp(-d)
    if nu == 1.5:
        a = _SQRT3 * d
        return (1.0 + a) * np.exp(-a)
    a = _SQRT5 * d
    return (1.0 + a + (5.0 / 3.0) * d * d) * np.exp(-a)


def _dg(d, nu):
    # Derivative of the correlation with respect to the scaled distance.
    if nu == 0.5:
        return -np.exp(-d)
    if nu == 1.5:
        return -3.0 * d * np.exp(-_SQRT3 * d)
    return -(5.0 / 3.0) * d * (1.0 + _SQRT5 * d) * np.exp(-_SQRT5 * d)


def matern(d, sigma2, nu=1.5):
    """Matern covariance sigma2 * g(d) at pre-scaled distances d."""
    if nu not in _SUPPORTED_NU:
        raise ValueError(f"nu must be one of {_SUPPORTED_NU}, got {nu}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    return sigma2 * _g(d, nu)


def _sq_dists(points_a, points_b):
    # Squared time and space separations between two point sets, (t, x, y) rows.
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    dt = a[..., :, None, 0] - b[..., None, :, 0]
    dx = a[..., :, None, 1] - b[..., None, :, 1]
    dy = a[..., :, None, 2] - b[..., None, :, 2]
    return dt * dt, dx * dx + dy * dy


def cov_from_sqdists(t2, s2, params):
    """Covariance from squared time separations t2 and squared spatial
    separations s2 (either may be broadcast against the other).  For
    spatial-only params, t2 is ignored and may be None."""
    if params.spatial_only:
        d = np.sqrt(s2) / params.rho_s
    else:
        d = np.sqrt(t2 / params.rho_t**2 + s2 / params.rho_s**2)
    return params.sigma2 * _g(d, params.nu)


def cov_grad_from_sqdists(t2, s2, params):
    """Covariance and its gradient with respect to the log-parameters.

    Returns ``(c, dc)`` where ``dc`` is a list of arrays in ``names()``
    order: d c / d log(sigma2), d c / d log(rho_s) and, for space-time
    params, d c / d log(rho_t).
    """
    u_s = s2 / params.rho_s**2
    if params.spatial_only:
        d2 = u_s
    else:
        u_t = t2 / params.rho_t**2
        d2 = u_t + u_s
    d = np.sqrt(d2)
    c = params.sigma2 * _g(d, params.nu)
    sg = params.sigma2 * _dg(d, params.nu)
    # d d / d log(rho) = -u / d with u the matching squared term; the ratio
    # tends to 0 as d -> 0 so the zero-distance entries are set directly.
    with np.errstate(divide="ignore", invalid="ignore"):
        ds = np.where(d > 0, -u_s / np.where(d > 0, d, 1.0), 0.0)
    grads = [c.copy(), sg * ds]
    if not params.spatial_only:
        with np.errstate(divide="ignore", invalid="ignore"):
            dt_ = np.where(d > 0, -u_t / np.where(d > 0, d, 1.0), 0.0)
        grads.append(sg * dt_)
    return c, grads


def cov_matrix(points_a, points_b=None, params=None):
    """Dense covariance matrix between point sets with rows (t, x, y).

    With ``points_b`` omitted the result is the symmetric matrix of
    ``points_a`` against itself.
    """
    if params is None:
        raise ValueError("params is required")
    if points_b is None:
        points_b = points_a
    t2, s2 = _sq_dists(points_a, points_b)
    return cov_from_sqdists(t2, s2, params)


def cov_matrix_grad(points_a, points_b=None, params=None):
    """Like :func:`cov_matrix` but also returns log-parameter gradients."""
    if params is None:
        raise ValueError("params is required")
    if points_b is None:
        points_b = points_a
    t2, s2 = _sq_dists(points_a, points_b)
    return cov_grad_from_sqdists(t2, s2, params)
