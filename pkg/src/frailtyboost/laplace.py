"""Laplace approximation of the marginal likelihood and its gradients.

The latent vector b enters the Bernoulli observations through
sigmoid(F_j + b_{u(j)}) where u maps observations to latent points.  With
prior precision Q from the Vecchia structure, the approximate log marginal
likelihood is

    loglik(b*) - 0.5 b*' Q b* + 0.5 log|Q| - 0.5 log|Q + W(b*)|

at the posterior mode b*, with W the diagonal of aggregated curvature
weights.  Gradients with respect to the fixed effects and the covariance
parameters account for the implicit dependence of the mode on both: the
direct first-order terms cancel at the mode, and what remains flows through
W and Q.

Small problems use a dense Cholesky; larger ones the sparse factorization
from :mod:`frailtyboost.sparse_ldl`, falling back to dense if the sparse
path reports trouble.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.linalg import cho_factor, cho_solve

from .hazard import bernoulli_d1, bernoulli_loglik, bernoulli_weights, weights_deriv
from .sparse_ldl import FactorizationError, SparseLDL, gather_entries

DENSE_CUTOFF = 800

_LOG_BOUNDS_SIGMA2 = (math.log(1e-8), math.log(1e6))
_LOG_BOUNDS_RANGE = (math.log(1e-6), math.log(1e6))


class DenseChol:
    """Dense SPD factorization with the same little interface as SparseLDL."""

    def __init__(self, A):
        if sparse.issparse(A):
            A = A.toarray()
        self._c = cho_factor(A, lower=True)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self._c[0]))))

    def solve(self, rhs):
        return cho_solve(self._c, np.asarray(rhs, dtype=float))

    def inverse(self):
        n = self._c[0].shape[0]
        return cho_solve(self._c, np.eye(n))


def factor_spd(A, dense_cutoff=None):
    """Factor a sparse SPD matrix, dense below the cutoff size."""
    cutoff = DENSE_CUTOFF if dense_cutoff is None else dense_cutoff
    n = A.shape[0]
    if n <= cutoff:
        return DenseChol(A)
    try:
        return SparseLDL(A)
    except FactorizationError as exc:
        warnings.warn(f"sparse factorization fell back to dense at n={n}: {exc}")
        return DenseChol(A)


@dataclass
class LaplaceResult:
    """Posterior mode and the pieces of the Laplace objective.

    ``b`` is in the ordered latent indexing of the structure it was fit
    with.  ``marginal`` is the approximate log marginal likelihood.
    """

    b: np.ndarray
    marginal: float
    penalized_loglik: float
    loglik: float
    W: np.ndarray
    factor: object
    n_iter: int
    converged: bool
    _cache: dict = field(default_factory=dict, repr=False)


def _aggregate(lat_idx, values, n_b):
    return np.bincount(lat_idx, weights=values, minlength=n_b)


def find_mode(struct, lat_idx, y, F, b0=None, tol=1e-8, max_iter=100, dense_cutoff=None):
    """Newton search for the posterior mode of the latent vector.

    ``lat_idx`` maps each observation to its latent point in ordered
    indexing.  Steps are halved until the penalized log-likelihood stops
    decreasing; convergence is declared when the Newton step drops below
    ``tol`` in the max norm.  The returned factorization of Q + W is always
    taken at the final mode.
    """
    y = np.asarray(y, dtype=float)
    F = np.asarray(F, dtype=float)
    lat_idx = np.asarray(lat_idx)
    n_b = struct.n
    Q = struct.precision()
    b = np.zeros(n_b) if b0 is None else np.array(b0, dtype=float)

    def penalized(bv):
        eta = F + bv[lat_idx]
        return bernoulli_loglik(y, eta) - 0.5 * struct.quad_form(bv), eta

    psi, eta = penalized(b)
    W = None
    factor = None
    converged = False
    n_iter = 0
    stale = True
    for _ in range(max_iter):
        W = _aggregate(lat_idx, bernoulli_weights(eta), n_b)
        factor = factor_spd(Q + sparse.diags(W), dense_cutoff=dense_cutoff)
        stale = False
        grad = _aggregate(lat_idx, bernoulli_d1(y, eta), n_b) - Q @ b
        step = factor.solve(grad)
        n_iter += 1
        if float(np.max(np.abs(step))) < tol:
            converged = True
            break
        t = 1.0
        psi_new, eta_new = penalized(b + step)
        while psi_new < psi and t > 1e-8:
            t *= 0.5
            psi_new, eta_new = penalized(b + t * step)
        if psi_new < psi:
            # no improving step length: at the mode up to round-off
            converged = float(np.max(np.abs(step))) < np.sqrt(tol)
            break
        b, psi, eta = b + t * step, psi_new, eta_new
        stale = True
    if stale:
        # iteration budget ran out right after an update: refresh at final b
        W = _aggregate(lat_idx, bernoulli_weights(eta), n_b)
        factor = factor_spd(Q + sparse.diags(W), dense_cutoff=dense_cutoff)
    if not converged:
        warnings.warn(f"mode search did not converge in {n_iter} iterations")

    # marginal: penalized loglik + 0.5 log|Q| - 0.5 log|Q+W|,
    # with log|Q| = -log|prior covariance|
    marginal = psi - 0.5 * struct.log_det_prior_cov() - 0.5 * factor.logdet()
    return LaplaceResult(
        b=b,
        marginal=float(marginal),
        penalized_loglik=float(psi),
        loglik=float(bernoulli_loglik(y, eta)),
        W=W,
        factor=factor,
        n_iter=n_iter,
        converged=converged,
    )


def marginal_loglik(struct, lat_idx, y, F, b0=None, tol=1e-8, max_iter=100, dense_cutoff=None):
    """Approximate log marginal likelihood (mode search included)."""
    return find_mode(
        struct, lat_idx, y, F, b0=b0, tol=tol, max_iter=max_iter, dense_cutoff=dense_cutoff
    ).marginal


def _mode_shared(res, struct, lat_idx, y, F):
    # pieces shared by both gradient routines, cached on the result: the
    # inverse of Q+W on (at least) the precision pattern, the chain vector
    # s through log|Q+W| at the mode, and t = (Q+W)^{-1} s
    c = res._cache
    if "t" not in c:
        eta = F + res.b[lat_idx]
        dw_agg = _aggregate(lat_idx, weights_deriv(eta), struct.n)
        if isinstance(res.factor, DenseChol):
            S = res.factor.inverse()
            S_diag = np.diag(S).copy()
        else:
            # extreme parameter probes can decouple the precision; pruned
            # factor positions then carry exactly-zero inverse entries
            S = res.factor.selected_inverse(missing_as_zero=True)
            S_diag = S.diagonal()
        s_vec = -0.5 * S_diag * dw_agg
        c["eta"] = eta
        c["S"] = S
        c["S_diag"] = S_diag
        c["s_vec"] = s_vec
        c["t"] = res.factor.solve(s_vec)
    return c


def grad_fixed_effects(struct, lat_idx, y, F, res):
    """Gradient of the approximate marginal log-likelihood in each F_j.

    The direct Bernoulli score plus the mode feedback through the curvature
    term: (y - p) - 0.5 S_uu w' - w t_u, with t solving (Q + W) t = s.
    """
    c = _mode_shared(res, struct, lat_idx, y, F)
    eta = c["eta"]
    return (
        bernoulli_d1(y, eta)
        - 0.5 * c["S_diag"][lat_idx] * weights_deriv(eta)
        - bernoulli_weights(eta) * c["t"][lat_idx]
    )


def grad_covparams(struct, lat_idx, y, F, res):
    """Gradient of the approximate marginal log-likelihood in the log
    covariance parameters (the structure must carry gradients)."""
    if not struct.has_grad:
        raise ValueError("structure was built without gradients")
    c = _mode_shared(res, struct, lat_idx, y, F)
    S = c["S"]
    t = c["t"]
    b = res.b
    dQs = struct.precision_grads()
    dlogdet_prior = struct.log_det_prior_grads()
    qcoo = struct.precision().tocoo()
    if isinstance(res.factor, DenseChol):
        s_at_pattern = S[qcoo.row, qcoo.col]
    else:
        s_at_pattern = gather_entries(S, qcoo.row, qcoo.col, missing_as_zero=True)
    out = np.empty(len(dQs))
    for k, dQ in enumerate(dQs):
        dqb = dQ @ b
        out[k] = (
            -0.5 * float(b @ dqb)
            - 0.5 * dlogdet_prior[k]
            - 0.5 * float(np.dot(s_at_pattern, dQ.data))
            - float(t @ dqb)
        )
    return out


def _marginal_objective(field, lat_idx, y, F, dense_cutoff, mode_tol):
    # negative marginal log-likelihood over log-params, with gradient;
    # warm-starts the mode search from the field's last mode
    def fg(logv):
        field.set_params(field.params.with_log_vector(logv))
        struct = field.structure(want_grad=True)
        res = find_mode(
            struct, lat_idx, y, F, b0=field.b_warm, tol=mode_tol, dense_cutoff=dense_cutoff
        )
        field.b_warm = res.b
        g = grad_covparams(struct, lat_idx, y, F, res)
        return -res.marginal, -g

    return fg


def _default_bounds(n_params):
    return [_LOG_BOUNDS_SIGMA2] + [_LOG_BOUNDS_RANGE] * (n_params - 1)


def _steps_to_refresh(counter):
    # steps remaining until the cumulative counter reaches a power of two
    p = 1
    while p <= counter:
        p <<= 1
    return p - counter


def optimize_covparams(
    field,
    lat_idx,
    y,
    F,
    method="lbfgs",
    max_steps=50,
    gtol=1e-5,
    bounds=None,
    dense_cutoff=None,
    mode_tol=1e-8,
):
    """Maximize the approximate marginal likelihood over covariance params.

    Runs on the log scale with box bounds.  ``field`` is updated in place:
    its parameters, warm-start mode, cumulative step counter and (for
    correlation-metric fields) neighbor sets, which are refreshed whenever
    the counter crosses a power of two.  ``method`` is 'lbfgs' or
    'nesterov'.  Returns an info dict with the final objective value.
    """
    fg = _marginal_objective(field, lat_idx, y, F, dense_cutoff, mode_tol)
    x = field.params.to_log_vector()
    if bounds is None:
        bounds = _default_bounds(x.size)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    if method == "lbfgs":
        remaining = int(max_steps)
        fval = None
        converged = False
        while remaining > 0:
            # floor the segment length: restarting L-BFGS discards curvature
            # memory, so tiny early segments cost several line-search evals
            # each; a late refresh only delays the neighbor update slightly
            seg = min(max(_steps_to_refresh(field.opt_iterations), 8), remaining)
            r = optimize.minimize(
                fg,
                x,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options=dict(maxiter=seg, gtol=gtol, ftol=1e-12),
            )
            x = r.x
            fval = float(r.fun)
            used = max(int(r.nit), 1)
            field.opt_iterations += used
            remaining -= used
            if int(r.nit) >= seg:
                field.refresh_neighbors()
            else:
                converged = True
                break
        field.set_params(field.params.with_log_vector(x))
        return dict(objective=-fval if fval is not None else None, converged=converged)

    if method == "nesterov":
        f_x, g_x = fg(x)
        x_prev = x.copy()
        lr = 0.1
        k = 0
        steps = 0
        converged = False
        while steps < int(max_steps):
            if float(np.max(np.abs(g_x))) < gtol:
                converged = True
                break
            steps += 1
            field.opt_iterations += 1
            c = field.opt_iterations
            refresh_due = c >= 1 and (c & (c - 1)) == 0
            mom = k / (k + 3.0)
            if mom > 0:
                yv = np.clip(x + mom * (x - x_prev), lo, hi)
                f_y, g_y = fg(yv)
                if f_y > f_x:
                    # extrapolation lost ground: restart momentum at x
                    k = 0
                    yv, f_y, g_y = x, f_x, g_x
            else:
                yv, f_y, g_y = x, f_x, g_x
            accepted = False
            for _ in range(25):
                cand = np.clip(yv - lr * g_y, lo, hi)
                f_c, g_c = fg(cand)
                if f_c <= f_y:
                    accepted = True
                    break
                lr *= 0.5
            if not accepted:
                converged = True  # no descent at tiny step: at a stationary point
                break
            x_prev, x = x, cand
            f_x, g_x = f_c, g_c
            k += 1
            lr = min(lr * 1.25, 1.0)
            if refresh_due:
                field.refresh_neighbors()
                f_x, g_x = fg(x)
        field.set_params(field.params.with_log_vector(x))
        return dict(objective=-f_x, converged=converged)

    raise ValueError(f"unknown optimizer {method!r}")
