"""Synthetic loan panels with known latent structure, for tests and demos.

Loans get uniform locations in a rectangular box and are observed yearly
from the first period until their first default (terminal censoring) or the
final period.  The latent risk surface b is drawn exactly from the
configured Matern process by dense Cholesky factorization, so recovery
tests compare against the true generating parameters.  Fixed effects are
either linear in iid uniform predictors or the fixed documented nonlinear
surface

    F(x) = c0 + 2 sin(pi x1 x2) + (x3 - 0.5)^2 - x4

so independently built implementations can cross-check results exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .covariance import cov_matrix
from .hazard import sigmoid
from .panel import FeatureSchema, LoanPanel

MAX_EXACT_GP_POINTS = 20_000


@dataclass
class SynthConfig:
    """Generator settings; ``params=None`` means no latent field (variance 0)."""

    n_loans: int = 500
    n_periods: int = 5
    first_period: int = 2001
    box: tuple = (0.0, 1.0, 0.0, 1.0)
    params: object = None
    gp_mode: str = "spacetime"
    fixed_effects: str = "nonlinear"
    n_features: int = 4
    beta: tuple | None = None
    base_rate: float = 0.1
    balance_range: tuple = (1e4, 3e5)
    censoring: str = "at-default"
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_loans <= 0 or self.n_periods <= 0:
            raise ValueError("n_loans and n_periods must be positive")
        if self.gp_mode not in ("spatial", "spacetime"):
            raise ValueError(f"unknown gp_mode {self.gp_mode!r}")
        if self.fixed_effects not in ("linear", "nonlinear"):
            raise ValueError(f"unknown fixed_effects mode {self.fixed_effects!r}")
        if self.censoring != "at-default":
            raise ValueError("only terminal censoring at the first default is supported")
        if self.fixed_effects == "nonlinear" and self.n_features < 4:
            raise ValueError("nonlinear mode needs at least 4 predictors")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError("base_rate must be in (0, 1)")
        x0, x1, y0, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError("box must have positive extent")


def nonlinear_surface(x, c0):
    """The fixed nonlinear fixed-effects function on [0,1]^k, k >= 4."""
    x = np.asarray(x, dtype=float)
    return (
        c0
        + 2.0 * np.sin(np.pi * x[:, 0] * x[:, 1])
        + (x[:, 2] - 0.5) ** 2
        - x[:, 3]
    )


def _draw_gp(points, params, jitter, rng):
    cov = cov_matrix(points, params=params)
    if jitter > 0:
        cov = cov + jitter * np.eye(len(cov))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(
            "generating covariance is not positive definite numerically; "
            "increase SynthConfig.jitter"
        ) from None
    return chol @ rng.standard_normal(len(cov))


def generate_synthetic(config):
    """Simulate a panel; returns ``(panel, truth)``.

    ``truth`` holds everything a recovery test needs: the latent points and
    the exact b drawn at them, the per-row latent index and F value, the
    generating parameters and coefficient values, and the config itself.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n_loans, n_periods = cfg.n_loans, cfg.n_periods
    years = cfg.first_period + np.arange(n_periods)

    x0, x1, y0, y1 = cfg.box
    loc = np.column_stack([
        rng.uniform(x0, x1, size=n_loans),
        rng.uniform(y0, y1, size=n_loans),
    ])

    # full loan-year grid, loan-major with years ascending inside each loan
    loan_idx = np.repeat(np.arange(n_loans), n_periods)
    year_col = np.tile(years, n_loans)

    k = cfg.n_features
    X = rng.uniform(0.0, 1.0, size=(n_loans * n_periods, k))

    if cfg.fixed_effects == "nonlinear":
        c0 = math.log(cfg.base_rate / (1.0 - cfg.base_rate))
        F = nonlinear_surface(X, c0)
        beta = None
    else:
        beta = np.asarray(
            cfg.beta if cfg.beta is not None else ([1.0, -1.0] + [0.0] * (k - 2))[:k],
            dtype=float,
        )
        if beta.shape != (k,):
            raise ValueError("beta length must match n_features")
        c0 = math.log(cfg.base_rate / (1.0 - cfg.base_rate))
        F = c0 + X @ beta if k else np.full(n_loans * n_periods, c0)

    if cfg.params is not None:
        if cfg.gp_mode == "spacetime":
            latent_points = np.column_stack([
                year_col.astype(float), loc[loan_idx, 0], loc[loan_idx, 1],
            ])
            latent_index = np.arange(n_loans * n_periods)
        else:
            latent_points = np.column_stack([
                np.zeros(n_loans), loc[:, 0], loc[:, 1],
            ])
            latent_index = loan_idx.copy()
        if len(latent_points) > MAX_EXACT_GP_POINTS:
            raise ValueError(
                f"{len(latent_points)} latent points exceed the exact-simulation "
                f"limit of {MAX_EXACT_GP_POINTS}"
            )
        b = _draw_gp(latent_points, cfg.params, cfg.jitter, rng)
    else:
        latent_points = np.zeros((0, 3))
        latent_index = np.full(n_loans * n_periods, -1, dtype=np.int64)
        b = np.zeros(0)

    b_row = b[latent_index] if cfg.params is not None else np.zeros(n_loans * n_periods)
    p = sigmoid(F + b_row)
    y = (rng.random(n_loans * n_periods) < p).astype(np.int64)

    balance_per_loan = rng.uniform(*cfg.balance_range, size=n_loans)

    # terminal censoring: keep each loan's rows up to and including its
    # first default, drop anything after
    keep = np.ones(n_loans * n_periods, dtype=bool)
    grid = y.reshape(n_loans, n_periods)
    for li in range(n_loans):
        hits = np.flatnonzero(grid[li])
        if hits.size:
            keep[li * n_periods + hits[0] + 1: (li + 1) * n_periods] = False
    kept = np.flatnonzero(keep)

    width = max(6, len(str(n_loans)))
    ids = np.array([f"L{i + 1:0{width}d}" for i in range(n_loans)], dtype=object)

    names = [f"x{j + 1}" for j in range(k)]
    schema = FeatureSchema(names=names, kinds=["numeric"] * k)
    features = {name: X[kept, j].copy() for j, name in enumerate(names)}

    panel = LoanPanel(
        loan_id=ids[loan_idx[kept]],
        year=year_col[kept],
        lon=loc[loan_idx[kept], 0],
        lat=loc[loan_idx[kept], 1],
        default=y[kept],
        balance=balance_per_loan[loan_idx[kept]],
        features=features,
        schema=schema,
    )

    truth = {
        "latent_points": latent_points,
        "b": b,
        "latent_index": latent_index[kept],
        "F": F[kept],
        "params": cfg.params,
        "beta": beta,
        "c0": c0,
        "gp_mode": cfg.gp_mode,
        "fixed_effects": cfg.fixed_effects,
        "seed": cfg.seed,
        "config": cfg,
    }
    return panel, truth
