"""Discrete treatment-initiation and censoring hazards."""

from .fit import (EPS, EPS_H, CumulativeFactors, HalConfig, HazardFit, NuisanceFits, NuisanceRecipe,
                  cumulative_factors, cumulative_weights, fit_hazard, fit_hazards, predict_hazard)
from .hal import (HalBasis, HalModel, HalPath, enumerate_basis, fit_hal_path, kkt_violation, lambda_floor,
                  score_diagnostic, select_undersmoothed, undersmooth_score)
from .logistic import LogisticModel, SeparationError, SingularInformation, fit_logistic
from .risk import CENSORING, TREATMENT, FeatureSpec, RiskSet, build_risk_rows

__all__ = [
    "EPS", "EPS_H", "CumulativeFactors", "HalConfig", "HazardFit", "NuisanceFits", "NuisanceRecipe",
    "cumulative_factors", "cumulative_weights", "fit_hazard", "fit_hazards", "predict_hazard",
    "HalBasis", "HalModel", "HalPath", "enumerate_basis", "fit_hal_path", "kkt_violation", "lambda_floor",
    "score_diagnostic", "select_undersmoothed", "undersmooth_score",
    "LogisticModel", "SeparationError", "SingularInformation", "fit_logistic",
    "CENSORING", "TREATMENT", "FeatureSpec", "RiskSet", "build_risk_rows",
]
