"""Model fitting: boosted trees over a latent Gaussian field, linear baselines.

Four model kinds share one interface.  ``linear-independent`` is a plain
logistic hazard fit.  ``linear-spatial`` and ``linear-spacetime`` add a
Matern latent field and alternate Newton steps on the coefficients with
L-BFGS steps on the covariance parameters, both driven by the Laplace
marginal likelihood.  ``boost-spacetime`` runs the boosting loop: per
iteration, re-optimize the covariance parameters (Nesterov, warm started),
take the functional gradient of the marginal likelihood in F, fit a
regression tree to it and step with the learning rate.
"""

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .covariance import CovarianceParams
from .hazard import bernoulli_loglik, bernoulli_weights, sigmoid
from .laplace import factor_spd, find_mode, grad_fixed_effects, optimize_covparams
from .panel import DesignEncoder, FeatureSchema, impute
from .trees import RegressionTree
from .vecchia import LatentField

MODEL_KINDS = (
    "linear-independent",
    "linear-spatial",
    "linear-spacetime",
    "boost-spacetime",
)

F0_RATE_CLAMP = 1e-6
SEPARATION_LOGIT = 30.0


def init_F0(y):
    """Constant initializer: logit of the empirical default rate, clamped
    away from 0 and 1."""
    y = np.asarray(y, dtype=float)
    if y.min() == y.max():
        raise ValueError("both outcome classes are required")
    rate = float(np.clip(y.mean(), F0_RATE_CLAMP, 1.0 - F0_RATE_CLAMP))
    return math.log(rate / (1.0 - rate))


@dataclass(frozen=True)
class TreeTuning:
    """Boosting hyperparameters; tree-count selection happens by validation
    early stopping up to ``max_trees``."""

    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 10
    l2_lambda: float = 0.0
    max_trees: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("max_depth and min_samples_leaf must be >= 1")
        if self.l2_lambda < 0 or self.max_trees < 0:
            raise ValueError("l2_lambda and max_trees must be nonnegative")


def default_tuning_grid(max_trees=1000):
    """The full candidate grid used for validation tuning."""
    grid = []
    for lr in (10.0, 1.0, 0.1):
        for depth in (2, 3, 5, 10):
            for leaf in (10, 100, 1000):
                for l2 in (0.0, 1.0, 10.0):
                    grid.append(TreeTuning(
                        learning_rate=lr, max_depth=depth, min_samples_leaf=leaf,
                        l2_lambda=l2, max_trees=max_trees,
                    ))
    return grid


@dataclass
class BoostTrace:
    """Per-iteration record of a boosting fit."""

    objective: list
    theta: list
    val_auc: list

    @property
    def best_iter(self):
        if not self.val_auc:
            return None
        return int(np.argmax(self.val_auc)) + 1


@dataclass
class PosteriorState:
    """What prediction needs from the training Laplace fit: the mode (in
    ordered latent indexing), aggregated curvature weights, and the
    factorization of precision-plus-curvature."""

    b: np.ndarray
    W: np.ndarray
    factor: object


class FittedModel:
    """A fitted hazard model with frozen preprocessing and, for GP kinds,
    the training latent state needed for prediction."""

    def __init__(self, kind, schema, imputer, encoder, beta=None, f0=None,
                 trees=None, learning_rate=None, params=None, gp_mode=None,
                 m=None, field=None, posterior=None, seed=0, dense_cutoff=None):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.schema = schema
        self.imputer = imputer
        self.encoder = encoder
        self.beta = None if beta is None else np.asarray(beta, dtype=float)
        self.f0 = f0
        self.trees = trees
        self.learning_rate = learning_rate
        self.params = params
        self.gp_mode = gp_mode
        self.m = m
        self.field = field
        self.posterior = posterior
        self.seed = seed
        self.dense_cutoff = dense_cutoff

    @property
    def has_gp(self):
        return self.params is not None

    def design_matrix(self, panel):
        filled = self.imputer.transform(panel)
        return self.encoder.transform(filled)

    def fixed_effects(self, panel):
        """F values for each panel row under the frozen preprocessing."""
        X = self.design_matrix(panel)
        if self.kind.startswith("linear"):
            return X @ self.beta
        F = np.full(panel.n_obs, self.f0, dtype=float)
        for tree in self.trees:
            F += self.learning_rate * tree.predict(X)
        return F

    def latent_points_for(self, panel):
        """Unique latent coordinates referenced by a panel plus the
        per-observation index into them."""
        if self.gp_mode == "spacetime":
            raw = np.column_stack([panel.year.astype(float), panel.lon, panel.lat])
        else:
            raw = np.column_stack([np.zeros(panel.n_obs), panel.lon, panel.lat])
        pts, inv = np.unique(raw, axis=0, return_inverse=True)
        return pts, inv.astype(np.int64)

    def to_dict(self):
        d = {
            "kind": self.kind,
            "seed": self.seed,
            "schema_text": self.schema.to_text(),
            "imputer": self.imputer.to_dict(),
            "encoder": self.encoder.to_dict(),
            "beta": None if self.beta is None else self.beta.tolist(),
            "f0": self.f0,
            "learning_rate": self.learning_rate,
            "trees": None if self.trees is None else [t.to_dict() for t in self.trees],
            "gp_mode": self.gp_mode,
            "m": self.m,
            "dense_cutoff": self.dense_cutoff,
            "theta": None,
            "latent": None,
        }
        if self.params is not None:
            d["theta"] = {
                "sigma2": self.params.sigma2,
                "rho_s": self.params.rho_s,
                "rho_t": self.params.rho_t,
                "nu": self.params.nu,
            }
            d["latent"] = {
                "points": self.field.points.tolist(),
                "order": self.field.order.tolist(),
                "nbr": self.field.nbr.tolist(),
                "b_hat": self.posterior.b.tolist(),
                "w_agg": self.posterior.W.tolist(),
            }
        return d

    @classmethod
    def from_dict(cls, d):
        schema = FeatureSchema.parse(d["schema_text"])
        from .panel import Imputer

        imputer = Imputer.from_dict(d["imputer"])
        encoder = DesignEncoder.from_dict(d["encoder"], schema)
        trees = None
        if d["trees"] is not None:
            trees = [RegressionTree.from_dict(t) for t in d["trees"]]
        params = None
        field = None
        posterior = None
        if d["theta"] is not None:
            t = d["theta"]
            params = CovarianceParams(
                sigma2=t["sigma2"], rho_s=t["rho_s"], rho_t=t["rho_t"], nu=t["nu"]
            )
            lat = d["latent"]
            metric = "euclidean" if d["gp_mode"] == "spatial" else "correlation"
            field = LatentField(
                points=np.asarray(lat["points"], dtype=float),
                order=np.asarray(lat["order"], dtype=np.int64),
                nbr=np.asarray(lat["nbr"], dtype=np.int64),
                params=params,
                metric=metric,
                m=d["m"],
            )
            W = np.asarray(lat["w_agg"], dtype=float)
            struct = field.structure()
            factor = factor_spd(struct.precision() + sparse.diags(W),
                                dense_cutoff=d.get("dense_cutoff"))
            posterior = PosteriorState(
                b=np.asarray(lat["b_hat"], dtype=float), W=W, factor=factor
            )
        return cls(
            kind=d["kind"], schema=schema, imputer=imputer, encoder=encoder,
            beta=d["beta"], f0=d["f0"], trees=trees,
            learning_rate=d["learning_rate"], params=params,
            gp_mode=d["gp_mode"], m=d["m"], field=field, posterior=posterior,
            seed=d["seed"], dense_cutoff=d.get("dense_cutoff"),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _newton_logistic(X, y, ridge=0.0, tol=1e-8, max_iter=100):
    n, p = X.shape
    beta = np.zeros(p)
    eta = X @ beta
    ll = bernoulli_loglik(y, eta) - 0.5 * ridge * beta @ beta
    converged = False
    for _ in range(max_iter):
        prob = sigmoid(eta)
        g = X.T @ (y - prob) - ridge * beta
        w = bernoulli_weights(eta)
        H = X.T @ (X * w[:, None]) + (ridge + 1e-12) * np.eye(p)
        step = np.linalg.solve(H, g)
        alpha = 1.0
        for _ in range(30):
            trial = beta + alpha * step
            eta_t = X @ trial
            ll_t = bernoulli_loglik(y, eta_t) - 0.5 * ridge * trial @ trial
            if ll_t >= ll:
                break
            alpha *= 0.5
        beta, eta, ll = trial, eta_t, ll_t
        if np.max(np.abs(alpha * step)) < tol:
            converged = True
            break
    return beta, converged


def fit_logistic(X, y):
    """Maximum-likelihood logistic fit with a ridge fallback on separation
    or a singular curvature matrix."""
    y = np.asarray(y, dtype=float)
    try:
        beta, converged = _newton_logistic(X, y)
    except np.linalg.LinAlgError:
        beta, converged = None, False
    if beta is None or not converged or np.max(np.abs(X @ beta)) > SEPARATION_LOGIT:
        warnings.warn("separation or ill-conditioning detected; refitting with "
                      "a 1e-6 ridge penalty")
        beta, _ = _newton_logistic(X, y, ridge=1e-6)
    return beta


def default_theta0(panel, gp_mode):
    """Covariance-parameter warm start: unit variance, spatial range at 30%
    of the bounding-box diagonal, temporal range of two periods."""
    dx = float(panel.lon.max() - panel.lon.min())
    dy = float(panel.lat.max() - panel.lat.min())
    diam = math.hypot(dx, dy)
    rho_s = 0.3 * diam if diam > 0 else 1.0
    if gp_mode == "spatial":
        return CovarianceParams(sigma2=1.0, rho_s=rho_s)
    return CovarianceParams(sigma2=1.0, rho_s=rho_s, rho_t=2.0)


def _latent_setup(panel, gp_mode, params, m, seed):
    if gp_mode == "spacetime":
        raw = np.column_stack([panel.year.astype(float), panel.lon, panel.lat])
    else:
        raw = np.column_stack([np.zeros(panel.n_obs), panel.lon, panel.lat])
    pts, inv = np.unique(raw, axis=0, return_inverse=True)
    field = LatentField.build(pts, params, gp_mode, m, rng=np.random.default_rng(seed))
    pos = np.empty(len(pts), dtype=np.int64)
    pos[field.order] = np.arange(len(pts))
    lat_idx = pos[inv]
    return field, lat_idx


def fit_linear(panel, kind, m=30, theta0=None, fix_theta=None, seed=0,
               max_cycles=50, tol=1e-6, theta_steps=5, dense_cutoff=None):
    """Fit a linear hazard model of the given kind.

    GP kinds alternate one damped Newton step on the coefficients (curvature
    from the conditional likelihood, line search on the Laplace marginal)
    with an L-BFGS pass over the covariance parameters, until the joint
    parameter vector moves less than ``tol`` relatively.  ``fix_theta`` pins
    the covariance parameters and skips their optimization.
    """
    if kind not in ("linear-independent", "linear-spatial", "linear-spacetime"):
        raise ValueError(f"not a linear model kind: {kind!r}")
    filled, imputer = impute(panel)
    encoder = DesignEncoder(panel.schema, linear=True).fit(filled)
    X = encoder.transform(filled)
    y = panel.default.astype(float)
    if y.min() == y.max():
        raise ValueError("both outcome classes are required")

    beta = fit_logistic(X, y)
    if kind == "linear-independent":
        return FittedModel(kind=kind, schema=panel.schema, imputer=imputer,
                           encoder=encoder, beta=beta, seed=seed)

    gp_mode = "spatial" if kind == "linear-spatial" else "spacetime"
    params0 = fix_theta if fix_theta is not None else (
        theta0 if theta0 is not None else default_theta0(panel, gp_mode))
    field, lat_idx = _latent_setup(panel, gp_mode, params0, m, seed)

    F = X @ beta
    res = None
    x_prev = np.concatenate([beta, field.params.to_log_vector()])
    for _cycle in range(max_cycles):
        if fix_theta is None:
            optimize_covparams(field, lat_idx, y, F, method="lbfgs",
                               max_steps=theta_steps, dense_cutoff=dense_cutoff)
        struct = field.structure()
        res = find_mode(struct, lat_idx, y, F, b0=field.b_warm,
                        dense_cutoff=dense_cutoff)
        if not res.converged:
            raise RuntimeError("Laplace mode search did not converge")

        g = X.T @ grad_fixed_effects(struct, lat_idx, y, F, res)
        eta = F + res.b[lat_idx]
        w = bernoulli_weights(eta)
        H = X.T @ (X * w[:, None]) + 1e-10 * np.eye(X.shape[1])
        step = np.linalg.solve(H, g)
        alpha = 1.0
        for _ in range(25):
            trial = beta + alpha * step
            F_t = X @ trial
            r_t = find_mode(struct, lat_idx, y, F_t, b0=res.b,
                            dense_cutoff=dense_cutoff)
            if r_t.marginal >= res.marginal:
                beta, F, res = trial, F_t, r_t
                field.b_warm = r_t.b
                break
            alpha *= 0.5

        x_cur = np.concatenate([beta, field.params.to_log_vector()])
        if np.max(np.abs(x_cur - x_prev)) < tol * (1.0 + np.max(np.abs(x_cur))):
            break
        x_prev = x_cur

    posterior = PosteriorState(b=res.b, W=res.W, factor=res.factor)
    return FittedModel(
        kind=kind, schema=panel.schema, imputer=imputer, encoder=encoder,
        beta=beta, params=field.params, gp_mode=gp_mode, m=m, field=field,
        posterior=posterior, seed=seed, dense_cutoff=dense_cutoff,
    )


def fit_boosted(panel, tuning=None, m=30, theta0=None, fix_theta=None, seed=0,
                val_panel=None, patience=None, theta_steps=10,
                dense_cutoff=None, gp_mode="spacetime"):
    """Boosting loop for the tree-based latent Gaussian model.

    Per iteration: warm-started covariance optimization (Nesterov), then a
    regression tree fit to the functional gradient of the Laplace marginal
    in F, then ``F += learning_rate * tree``.  Returns the fitted model and
    the per-iteration trace (negative marginal objective, covariance
    parameters, validation AUC when ``val_panel`` is given).  With
    ``patience`` set, stops early once the validation AUC has not improved
    for that many iterations.
    """
    from .prediction import predict_default_probs
    from .scoring import auc as auc_metric

    tuning = tuning if tuning is not None else TreeTuning()
    filled, imputer = impute(panel)
    encoder = DesignEncoder(panel.schema, linear=False).fit(filled)
    X = encoder.transform(filled)
    y = panel.default.astype(float)

    f0 = init_F0(y)
    F = np.full(panel.n_obs, f0)

    params0 = fix_theta if fix_theta is not None else (
        theta0 if theta0 is not None else default_theta0(panel, gp_mode))
    field, lat_idx = _latent_setup(panel, gp_mode, params0, m, seed)

    if val_panel is not None and val_panel.n_obs == 0:
        raise ValueError("validation panel is empty")

    trees = []
    trace = BoostTrace(objective=[], theta=[], val_auc=[])

    def model_snapshot(res):
        return FittedModel(
            kind="boost-spacetime", schema=panel.schema, imputer=imputer,
            encoder=encoder, f0=f0, trees=list(trees),
            learning_rate=tuning.learning_rate, params=field.params,
            gp_mode=gp_mode, m=m, field=field,
            posterior=PosteriorState(b=res.b, W=res.W, factor=res.factor),
            seed=seed, dense_cutoff=dense_cutoff,
        )

    def theta_pass(steps, method="nesterov"):
        if fix_theta is None:
            optimize_covparams(field, lat_idx, y, F, method=method,
                               max_steps=steps, dense_cutoff=dense_cutoff)
        res = find_mode(field.structure(), lat_idx, y, F, b0=field.b_warm,
                        dense_cutoff=dense_cutoff)
        field.b_warm = res.b
        return res

    if tuning.max_trees == 0:
        # one-shot estimation, no warm momentum to carry: quasi-Newton
        res = theta_pass(50, method="lbfgs")
        if not res.converged:
            raise RuntimeError("Laplace mode search did not converge")
        return model_snapshot(res), trace

    best_val = -np.inf
    best_it = 0
    for it in range(1, tuning.max_trees + 1):
        res = theta_pass(theta_steps)
        if not res.converged:
            raise RuntimeError(
                f"Laplace mode search did not converge at boosting iteration {it}"
            )
        struct = field.structure()
        grad = grad_fixed_effects(struct, lat_idx, y, F, res)

        tree = RegressionTree(
            max_depth=tuning.max_depth,
            min_samples_leaf=tuning.min_samples_leaf,
            l2_reg=tuning.l2_lambda,
        ).fit(X, grad)
        trees.append(tree)
        F = F + tuning.learning_rate * tree.predict(X)

        res = find_mode(struct, lat_idx, y, F, b0=field.b_warm,
                        dense_cutoff=dense_cutoff)
        if not res.converged:
            raise RuntimeError(
                f"Laplace mode search did not converge at boosting iteration {it}"
            )
        field.b_warm = res.b

        trace.objective.append(-res.marginal)
        trace.theta.append(field.params)
        if val_panel is not None:
            probs = predict_default_probs(model_snapshot(res), val_panel)
            score = auc_metric(probs, val_panel.default)
            trace.val_auc.append(score)
            if score > best_val:
                best_val, best_it = score, it
            if patience is not None and it - best_it >= patience:
                break

    return model_snapshot(res), trace


def tune_boosted(inner_panel, val_panel, grid=None, m=30, theta0=None, seed=0,
                 patience=50, theta_steps=5, dense_cutoff=None):
    """Grid search scored by validation AUC with per-iteration early
    stopping; the tree count of the winner is its best iteration.  Ties go
    to fewer trees, then to a smaller depth.
    """
    if val_panel.n_obs == 0:
        raise ValueError("validation panel is empty")
    if val_panel.default.min() == val_panel.default.max():
        raise ValueError("validation panel needs both outcome classes")
    grid = grid if grid is not None else default_tuning_grid()
    report = []
    for t in grid:
        _, trace = fit_boosted(
            inner_panel, t, m=m, theta0=theta0, seed=seed, val_panel=val_panel,
            patience=patience, theta_steps=theta_steps, dense_cutoff=dense_cutoff,
        )
        aucs = np.asarray(trace.val_auc)
        best_iter = int(np.argmax(aucs)) + 1  # first max: fewest trees
        report.append({
            "learning_rate": t.learning_rate,
            "max_depth": t.max_depth,
            "min_samples_leaf": t.min_samples_leaf,
            "l2_lambda": t.l2_lambda,
            "best_iter": best_iter,
            "val_auc": float(aucs[best_iter - 1]),
        })
    order = sorted(
        range(len(grid)),
        key=lambda i: (-report[i]["val_auc"], report[i]["best_iter"],
                       grid[i].max_depth, i),
    )
    winner = order[0]
    best = replace(grid[winner], max_trees=report[winner]["best_iter"])
    return best, report
