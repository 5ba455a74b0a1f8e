"""Lasso-based uniformly valid confidence sets for linear mixed models.

Fits Gaussian linear mixed models with a linear covariance structure
(REML for the covariance parameters, weighted Lasso for the fixed
effects) and constructs confidence ellipsoids for the fixed effects
whose coverage holds uniformly over both coefficient and covariance
parameter spaces, together with comparison baselines and a Monte Carlo
coverage engine.
"""

from .baselines import (
    AicWlsSet,
    SelectionResult,
    aic_select,
    aic_wls_set,
    naive_lasso_set,
    wls_ellipsoid,
)
from .conditions import ConditionReport, K_matrix, Thresholds, check_all, omega_bounds
from .confset import (
    ConfidenceEllipsoid,
    build_ellipsoid,
    contains,
    coordinate_interval,
    ellipsoid_from_dict,
    ellipsoid_to_dict,
    max_noncentrality,
)
from .lasso import LassoSolution, fit_lasso, kkt_residual, u_d, wls
from .model import (
    CovOperator,
    FactorizationError,
    ModelData,
    assemble_cov,
    build_from_clustered,
    build_from_components,
    compute_C,
    random_intercept_model,
    whiten,
)
from .ncchisq import chisq_quantile, gammainc_lower, ncchisq_cdf, ncchisq_quantile
from .reml import ThetaEstimate, fit_reml, nu, profile_ml, reml_fisher_info, reml_loglik, reml_score
from .simulate import (
    CoverageGrid,
    CoverageRecord,
    SimConfig,
    coverage_cell,
    gen_design,
    run_grid,
    simulate_response,
    write_grid_csv,
)

__version__ = "0.1.0"
