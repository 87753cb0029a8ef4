"""Tree-boosted spatio-temporal frailty models for loan default risk.

Discrete-time hazard models where the per-period default probability is
sigmoid(F(x) + b), with F either a linear predictor or a boosted tree
ensemble and b a latent Gaussian process over time, space, or space-time.
Estimation uses a Laplace approximation to the marginal likelihood with a
Vecchia approximation of the GP prior, so training scales to large panels.
"""

__version__ = "0.1.0"

from .covariance import CovarianceParams, matern, cov_matrix, cov_matrix_grad
from .vecchia import (
    LatentField,
    VecchiaStructure,
    build_vecchia,
    order_points,
    select_neighbors,
)
from .laplace import (
    LaplaceResult,
    find_mode,
    grad_covparams,
    grad_fixed_effects,
    marginal_loglik,
    optimize_covparams,
)
from .panel import (
    DesignEncoder,
    FeatureSchema,
    Imputer,
    LoanPanel,
    expanding_window_split,
    impute,
    load_panel,
    read_panel_csv,
    write_panel_csv,
)
from .synthetic import SynthConfig, generate_synthetic
from .trees import RegressionTree
from .models import (
    FittedModel,
    TreeTuning,
    default_tuning_grid,
    fit_boosted,
    fit_linear,
    init_F0,
    tune_boosted,
)
from .prediction import (
    LatentPredictive,
    frailty_map,
    latent_predict,
    predict_default_probs,
    response_probability,
)
from .portfolio import (
    LossDistribution,
    empirical_quantile,
    realized_loss,
    simulate_losses,
    summarize,
)
from .scoring import (
    BinSpec,
    auc,
    brier,
    crps_empirical,
    ece,
    h_measure,
    log_loss,
    quantile_loss,
    rmse,
)

__all__ = [
    "CovarianceParams",
    "matern",
    "cov_matrix",
    "cov_matrix_grad",
    "LatentField",
    "VecchiaStructure",
    "build_vecchia",
    "order_points",
    "select_neighbors",
    "LaplaceResult",
    "find_mode",
    "grad_covparams",
    "grad_fixed_effects",
    "marginal_loglik",
    "optimize_covparams",
    "DesignEncoder",
    "FeatureSchema",
    "Imputer",
    "LoanPanel",
    "expanding_window_split",
    "impute",
    "load_panel",
    "read_panel_csv",
    "write_panel_csv",
    "SynthConfig",
    "generate_synthetic",
    "RegressionTree",
    "FittedModel",
    "TreeTuning",
    "default_tuning_grid",
    "fit_boosted",
    "fit_linear",
    "init_F0",
    "tune_boosted",
    "LatentPredictive",
    "frailty_map",
    "latent_predict",
    "predict_default_probs",
    "response_probability",
    "LossDistribution",
    "empirical_quantile",
    "realized_loss",
    "simulate_losses",
    "summarize",
    "BinSpec",
    "auc",
    "brier",
    "crps_empirical",
    "ece",
    "h_measure",
    "log_loss",
    "quantile_loss",
    "rmse",
]
