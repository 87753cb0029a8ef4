"""One-period-ahead prediction from the fitted latent state.

The latent field at new space-time points is conditioned on the training
points only: each prediction point regresses on its nearest training
points, and the training posterior (Laplace mode and curvature) is
propagated through those regression weights.  Joint mode additionally lets
prediction points condition on earlier prediction points, giving a sparse
sequential sampler whose dense covariance factor supports correlated
portfolio simulation.  Default probabilities integrate the link over the
latent predictive law with adaptive Gauss-Hermite quadrature.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve_triangular

from .covariance import cov_from_sqdists
from .hazard import sigmoid
from .vecchia import _scaled_sq_dists

FRAILTY_MAP_HEADER = "period,lon,lat,posterior_mean"
MAX_JOINT_POINTS = 5000


@dataclass
class LatentPredictive:
    """Marginal predictive law per point; ``cov_factor`` (lower Cholesky of
    the joint covariance) is present in joint mode."""

    points: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    cov_factor: np.ndarray = None

    def __post_init__(self):
        if np.any(self.var < 0):
            raise ValueError("negative predictive variance")

    def sample(self, n_draws, rng):
        """Correlated joint draws, (n_draws, n_points); joint mode only."""
        if self.cov_factor is None:
            raise ValueError("predictive was built without want_joint")
        z = rng.standard_normal((n_draws, self.mean.size))
        return self.mean[None, :] + z @ self.cov_factor.T


def _cross_coeffs(own_pts, ref_pts, nbr, params, jitter=1e-10):
    """Regression of each own point on its (padded) reference neighbors:
    A = c' C^{-1} and residual variance D = sigma2 - A c, clamped at 0."""
    n, m = nbr.shape
    if m == 0:
        return np.zeros((n, 0)), np.full(n, params.sigma2)
    valid = nbr >= 0
    safe = np.where(valid, nbr, 0)
    npts = ref_pts[safe]

    dt = own_pts[:, None, 0] - npts[:, :, 0]
    dx = own_pts[:, None, 1] - npts[:, :, 1]
    dy = own_pts[:, None, 2] - npts[:, :, 2]
    c_in = cov_from_sqdists(dt * dt, dx * dx + dy * dy, params)

    dtn = npts[:, :, None, 0] - npts[:, None, :, 0]
    dxn = npts[:, :, None, 1] - npts[:, None, :, 1]
    dyn = npts[:, :, None, 2] - npts[:, None, :, 2]
    c_nn = cov_from_sqdists(dtn * dtn, dxn * dxn + dyn * dyn, params)

    pair_valid = valid[:, :, None] & valid[:, None, :]
    c_in = np.where(valid, c_in, 0.0)
    c_nn = np.where(pair_valid, c_nn, np.eye(m)[None, :, :])
    try:
        A = np.linalg.solve(c_nn, c_in[..., None])[..., 0]
    except np.linalg.LinAlgError:
        bump = jitter * params.sigma2 * np.eye(m)[None, :, :]
        A = np.linalg.solve(c_nn + bump, c_in[..., None])[..., 0]
    D = np.maximum(params.sigma2 - np.einsum("nk,nk->n", A, c_in), 0.0)
    return A, D


def _nearest_training(pred_pts, train_pts, m, metric, params, block=512):
    """Up to m nearest training points per prediction point, stable ties."""
    n_t = train_pts.shape[0]
    k = min(m, n_t)
    n_p = pred_pts.shape[0]
    nbr = np.full((n_p, m), -1, dtype=np.int64)
    for lo in range(0, n_p, block):
        hi = min(lo + block, n_p)
        d2 = _scaled_sq_dists(pred_pts[lo:hi], train_pts, metric, params)
        idx = np.argsort(d2, axis=1, kind="stable")
        nbr[lo:hi, :k] = idx[:, :k]
    return nbr


def _flag_far_periods(model, pred_pts):
    params = model.params
    if params.spatial_only:
        return
    t_train = model.field.points[:, 0]
    lo, hi = t_train.min(), t_train.max()
    gap = np.maximum(pred_pts[:, 0] - hi, lo - pred_pts[:, 0])
    limit = 10.0 * params.rho_t
    if np.any(gap > limit):
        warnings.warn(
            f"{int(np.sum(gap > limit))} prediction points lie more than "
            f"10 temporal ranges outside the training periods"
        )


def latent_predict(model, pred_points, want_joint=False, block=512, m=None):
    """Posterior predictive of the latent field at new points.

    Each point conditions on its m nearest training points under the
    model's neighbor metric (``m`` defaults to the model's training value);
    the training posterior N(b_hat, (Q+W)^-1) propagates through the
    regression weights.  ``want_joint`` additionally conditions on earlier
    prediction points and returns a dense covariance factor for correlated
    sampling.
    """
    if not model.has_gp:
        raise ValueError("model has no latent component")
    pred_pts = np.asarray(pred_points, dtype=float)
    if pred_pts.ndim != 2 or pred_pts.shape[1] != 3:
        raise ValueError("prediction points must be (n, 3) rows (t, x, y)")
    _flag_far_periods(model, pred_pts)

    field = model.field
    params = model.params
    train_pts = field.points[field.order]
    n_t = train_pts.shape[0]
    n_p = pred_pts.shape[0]
    b_hat = model.posterior.b
    factor = model.posterior.factor
    if m is None:
        m = model.m
    m = min(int(m), n_t + n_p - 1) if m > 0 else n_t
    if not want_joint:
        m = min(m, n_t)

    if not want_joint:
        nbr = _nearest_training(pred_pts, train_pts, m, field.metric, params)
        A, D = _cross_coeffs(pred_pts, train_pts, nbr, params)
        valid = nbr >= 0
        safe = np.where(valid, nbr, 0)
        mean = np.einsum("nk,nk->n", A, b_hat[safe])
        var = D.copy()
        for lo in range(0, n_p, block):
            hi = min(lo + block, n_p)
            rhs = np.zeros((n_t, hi - lo))
            rows = safe[lo:hi]
            cols = np.repeat(np.arange(hi - lo), rows.shape[1])
            np.add.at(rhs, (rows.ravel(), cols), A[lo:hi].ravel())
            sol = factor.solve(rhs)
            var[lo:hi] += np.einsum("tn,tn->n", rhs, sol)
        return LatentPredictive(points=pred_pts, mean=mean, var=var)

    if n_p > MAX_JOINT_POINTS:
        raise ValueError(
            f"joint mode supports at most {MAX_JOINT_POINTS} prediction points"
        )

    # joint mode: predecessors are all training points plus earlier
    # prediction points; ties resolve toward training (earlier) indices
    d2_t = _scaled_sq_dists(pred_pts, train_pts, field.metric, params)
    d2_p = _scaled_sq_dists(pred_pts, pred_pts, field.metric, params)
    nbr = np.full((n_p, m), -1, dtype=np.int64)
    for i in range(n_p):
        d2 = np.concatenate([d2_t[i], d2_p[i, :i]])
        k = min(m, d2.size)
        idx = np.argsort(d2, kind="stable")[:k]
        nbr[i, :k] = idx
    A, D = _cross_coeffs(pred_pts, np.vstack([train_pts, pred_pts]), nbr, params)

    valid = nbr >= 0
    rows = np.repeat(np.arange(n_p), m)[valid.ravel()]
    cols = nbr.ravel()[valid.ravel()]
    vals = A.ravel()[valid.ravel()]
    is_train = cols < n_t
    M_pt = sparse.csr_matrix(
        (vals[is_train], (rows[is_train], cols[is_train])), shape=(n_p, n_t)
    )
    M_pp = sparse.csr_matrix(
        (vals[~is_train], (rows[~is_train], cols[~is_train] - n_t)),
        shape=(n_p, n_p),
    )
    unit = sparse.identity(n_p, format="csr") - M_pp

    mean = spsolve_triangular(unit, M_pt @ b_hat, lower=True, unit_diagonal=True)

    # G = M_pt (Q+W)^-1 M_pt^T, in column blocks
    G = np.empty((n_p, n_p))
    Mt = M_pt.T.tocsc()
    for lo in range(0, n_p, 64):
        hi = min(lo + 64, n_p)
        sol = factor.solve(Mt[:, lo:hi].toarray())
        G[:, lo:hi] = M_pt @ sol
    K = 0.5 * (G + G.T)
    K[np.arange(n_p), np.arange(n_p)] += D
    Y = spsolve_triangular(unit, K, lower=True, unit_diagonal=True)
    V = spsolve_triangular(unit, Y.T, lower=True, unit_diagonal=True).T
    V = 0.5 * (V + V.T)

    bump = 0.0
    scale = max(np.max(np.diag(V)), 1e-300)
    for _ in range(6):
        try:
            L = np.linalg.cholesky(V + bump * np.eye(n_p))
            break
        except np.linalg.LinAlgError:
            bump = max(bump * 100.0, 1e-12 * scale)
    else:
        raise np.linalg.LinAlgError("joint predictive covariance not factorizable")
    return LatentPredictive(
        points=pred_pts, mean=mean, var=np.maximum(np.diag(V), 0.0), cov_factor=L
    )


def response_probability(F, mu, v, nodes=20):
    """Default probability integrating the link over N(mu, v).

    Adaptive Gauss-Hermite: nodes are centered at the mode of the integrand
    and scaled by its curvature, so a 20-node rule is accurate far into the
    tails.  ``v = 0`` short-circuits to link(F + mu).  Accepts scalars or
    aligned vectors.
    """
    F = np.atleast_1d(np.asarray(F, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    F, mu, v = np.broadcast_arrays(F, mu, v)
    out = np.empty(F.shape)
    point_mass = v <= 1e-300
    out[point_mass] = sigmoid(F[point_mass] + mu[point_mass])
    if np.all(point_mass):
        return out if out.size > 1 else float(out[0])

    Fa, mua, va = F[~point_mass], mu[~point_mass], v[~point_mass]
    # mode of log link(F+z) - (z-mu)^2/(2v) by Newton
    z = mua.copy()
    for _ in range(100):
        p = sigmoid(Fa + z)
        g = (1.0 - p) - (z - mua) / va
        h = -p * (1.0 - p) - 1.0 / va
        step = g / h
        z -= step
        if np.max(np.abs(step)) < 1e-12:
            break
    p = sigmoid(Fa + z)
    shat = 1.0 / np.sqrt(p * (1.0 - p) + 1.0 / va)

    x, w = np.polynomial.hermite.hermgauss(int(nodes))
    logw = np.log(w) + x * x
    zk = z[:, None] + np.sqrt(2.0) * shat[:, None] * x[None, :]
    log_link = -np.logaddexp(0.0, -(Fa[:, None] + zk))
    log_phi = -0.5 * (zk - mua[:, None]) ** 2 / va[:, None] - 0.5 * np.log(
        2.0 * np.pi * va[:, None]
    )
    terms = logw[None, :] + log_link + log_phi
    tmax = terms.max(axis=1, keepdims=True)
    integral = np.exp(tmax[:, 0]) * np.sum(np.exp(terms - tmax), axis=1)
    vals = np.sqrt(2.0) * shat * integral
    out[~point_mass] = np.clip(vals, 1e-300, 1.0 - 1e-16)
    return out if out.size > 1 else float(out[0])


def predict_default_probs(model, panel, nodes=20):
    """Per-observation default probabilities for a panel under a fitted
    model; GP kinds marginalize the latent predictive by quadrature."""
    F = model.fixed_effects(panel)
    if not model.has_gp:
        return sigmoid(F)
    pts, inv = model.latent_points_for(panel)
    lp = latent_predict(model, pts)
    probs = response_probability(F, lp.mean[inv], lp.var[inv], nodes=nodes)
    return np.atleast_1d(probs)


def frailty_map(model, periods=None, locations=None):
    """Posterior-mean surface rows ``(period, lon, lat, posterior_mean)``.

    With no arguments, evaluates at the training latent points (the cached
    mode).  With ``periods`` and ``locations`` (k, 2), evaluates the
    predictive mean on that grid.
    """
    if not model.has_gp:
        raise ValueError("model has no latent component")
    if periods is None and locations is None:
        pts = model.field.points[model.field.order]
        mean = model.posterior.b
    else:
        if locations is None or periods is None:
            raise ValueError("grid mode needs both periods and locations")
        locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        periods = np.asarray(periods, dtype=float).reshape(-1)
        if locations.shape[0] == 0 or periods.shape[0] == 0:
            return np.zeros((0, 4))
        pts = np.vstack([
            np.column_stack([np.full(len(locations), t),
                             locations[:, 0], locations[:, 1]])
            for t in periods
        ])
        mean = latent_predict(model, pts).mean
    rows = np.column_stack([pts[:, 0], pts[:, 1], pts[:, 2], mean])
    key = np.lexsort((rows[:, 2], rows[:, 1], rows[:, 0]))
    return rows[key]
