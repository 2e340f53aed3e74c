"""Mixed effects random forests for small area estimation.

Fit a unit-level model ``y = f(X) + Z v + e`` with a regression-forest
fixed part and area random intercepts, predict area means for sampled and
non-sampled areas, and estimate their MSE with a random-effect block
bootstrap. A simulation engine evaluates the estimators on synthetic
populations.
"""

from .bias import BiasCorrectionResult, bias_corrected_variance
from .bootstrap import BootstrapResult, RebConfig, bootstrap_mse, decompose_residuals
from .data import (AreaIndex, CensusDataset, SurveyDataset, align, load_census, load_survey,
                   write_census, write_survey)
from .estimate import AreaEstimates, estimate_means
from .exceptions import (ConfigError, ConsistencyError, EmptyInputError, FitError, MerfError,
                         ParseError, SchemaError)
from .forest import Forest, ForestConfig, fit_forest
from .io import load_model, save_model
from .merf import (ConvergenceWarning, LinearLearner, MerfConfig, MerfModel,
                   RandomForestLearner, fit_merf)
from .mixed import RandomEffects, VarianceComponents, blup, fit_variance_components, gll
from .scenarios import SCENARIOS, ScenarioSpec, draw_sample, generate_population, scenario
from .simulation import (MetricTable, SimConfig, SimResult, compute_metrics, run_design_based,
                         run_model_based)

__version__ = "0.1.0"

__all__ = [
    "AreaEstimates", "AreaIndex", "BiasCorrectionResult", "BootstrapResult", "CensusDataset",
    "ConfigError", "ConsistencyError", "ConvergenceWarning", "EmptyInputError", "FitError",
    "Forest", "ForestConfig", "LinearLearner", "MerfConfig", "MerfError", "MerfModel",
    "MetricTable", "ParseError", "RandomEffects", "RandomForestLearner", "RebConfig",
    "SCENARIOS", "ScenarioSpec", "SchemaError", "SimConfig", "SimResult", "SurveyDataset",
    "VarianceComponents", "align", "bias_corrected_variance", "blup", "bootstrap_mse",
    "compute_metrics", "decompose_residuals", "draw_sample", "estimate_means", "fit_forest",
    "fit_merf", "fit_variance_components", "generate_population", "gll", "load_census",
    "load_model", "load_survey", "run_design_based", "run_model_based", "save_model",
    "scenario", "write_census", "write_survey",
]
