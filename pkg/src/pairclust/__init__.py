"""Simulation laboratory and estimators for matched-pair cluster experiments.

Generate synthetic paired-cluster trials (with optional pre- or
post-treatment covariate constructions and a deliberately broken
randomization variant), estimate effects three ways (design-based,
hierarchical model with or without a covariate, likelihood-ratio pre-test),
quantify the estimand gap a covariate adjustment introduces, build pairs
from covariates, and sweep the within-pair imbalance to compare bias, RMSE
and coverage across estimators.

Set PAIRCLUST_NO_NUMBA=1 before import to run the pure-numpy likelihood
kernels instead of the jit-compiled ones (same numbers, slower).
"""

__version__ = "0.1.0"

from .core import (
    EstimateResult,
    ExperimentData,
    PotentialOutcomeTable,
    observed_from_potential,
    read_experiment_csv,
    validate,
    wald_interval,
    write_experiment_csv,
)
from .dgp import (
    CovariateScenario,
    DgpConfig,
    RandomizationScheme,
    config_from_dict,
    config_to_dict,
    generate_covariates,
    generate_experiment,
    load_config,
    write_truth_csv,
)
from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    MatchingError,
    PairclustError,
    SimulationError,
)
from .estimators import (
    DiscrepancyResult,
    HierarchicalParams,
    bias_discrepancy,
    estimate_design_based,
    fit_hier_cov,
    fit_hier_nocov,
    lr_pretest_estimate,
)
from .matching import (
    CovariateMatrix,
    PairingResult,
    balance_report,
    cem_pairing,
    greedy_pairing,
    mahalanobis_matrix,
    optimal_pairing,
)
from .montecarlo import (
    DEFAULT_GRID,
    ESTIMATOR_KEYS,
    MetricsRow,
    SimulationPlan,
    emit_figure,
    load_plan,
    plan_from_dict,
    plan_to_dict,
    run_cell,
    run_sweep,
    scenario1_plan,
    scenario2_plan,
    true_estimand,
    write_metrics_csv,
    write_plan,
)

__all__ = [
    "__version__",
    "EstimateResult",
    "ExperimentData",
    "PotentialOutcomeTable",
    "observed_from_potential",
    "read_experiment_csv",
    "validate",
    "wald_interval",
    "write_experiment_csv",
    "CovariateScenario",
    "DgpConfig",
    "RandomizationScheme",
    "config_from_dict",
    "config_to_dict",
    "generate_covariates",
    "generate_experiment",
    "load_config",
    "write_truth_csv",
    "ConfigError",
    "DataError",
    "EstimationError",
    "MatchingError",
    "PairclustError",
    "SimulationError",
    "DiscrepancyResult",
    "HierarchicalParams",
    "bias_discrepancy",
    "estimate_design_based",
    "fit_hier_cov",
    "fit_hier_nocov",
    "lr_pretest_estimate",
    "CovariateMatrix",
    "PairingResult",
    "balance_report",
    "cem_pairing",
    "greedy_pairing",
    "mahalanobis_matrix",
    "optimal_pairing",
    "DEFAULT_GRID",
    "ESTIMATOR_KEYS",
    "MetricsRow",
    "SimulationPlan",
    "emit_figure",
    "load_plan",
    "plan_from_dict",
    "plan_to_dict",
    "run_cell",
    "run_sweep",
    "scenario1_plan",
    "scenario2_plan",
    "true_estimand",
    "write_metrics_csv",
    "write_plan",
]
