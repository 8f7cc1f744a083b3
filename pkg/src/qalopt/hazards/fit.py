"""Fitted treatment and censoring hazards and the cumulative weights they induce."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from ..panel import Panel
from . import hal
from .logistic import LogisticModel, fit_logistic
from .risk import CENSORING, ROLES, TREATMENT, FeatureSpec, RiskSet, at_risk_pairs, build_risk_rows

log = logging.getLogger(__name__)

EPS = 1e-3
EPS_H = 1e-3
KINDS = ("logistic", "hal", "truth")

# A known hazard: (role, panel, subject, stage) -> probability per row.
TruthHazard = Callable[[str, Panel, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class HalConfig:
    max_depth: int = 2
    max_knots_per_section: int = 50
    cv_folds: int = 5
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-4
    tuning: str = "undersmooth"  # or "cv"
    censoring_divisor: str = "observed"  # or "hazard"
    early_stop: bool = True
    patience: int = 5

    def __post_init__(self):
        if self.tuning not in ("undersmooth", "cv"):
            raise ValueError(f"unknown HAL tuning {self.tuning!r}")
        if self.censoring_divisor not in ("observed", "hazard"):
            raise ValueError(f"unknown censoring divisor {self.censoring_divisor!r}")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "HalConfig":
        return cls(**d)


@dataclass(frozen=True)
class NuisanceRecipe:
    """How to fit both hazards: model kind, features, and tuning.

    ``per_stage`` fits a separate model at every landmark (stage terms are
    then dropped from the features).  ``truth`` supplies known hazards for
    the ``"truth"`` kind.
    """

    kind: str = "logistic"
    treatment: FeatureSpec = FeatureSpec(("z1", "z2"))
    censoring: FeatureSpec = FeatureSpec(("z1", "z2"))
    hal: HalConfig = HalConfig()
    per_stage: bool = False
    truth: TruthHazard | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown nuisance kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "truth" and self.truth is None:
            raise ValueError("the 'truth' kind needs known hazards")

    def spec(self, role: str) -> FeatureSpec:
        return self.treatment if role == TREATMENT else self.censoring

    def to_dict(self) -> dict:
        return {"kind": self.kind, "treatment": self.treatment.to_dict(),
                "censoring": self.censoring.to_dict(), "hal": self.hal.to_dict(),
                "per_stage": self.per_stage}

    @classmethod
    def from_dict(cls, d: dict, truth: TruthHazard | None = None) -> "NuisanceRecipe":
        return cls(d.get("kind", "logistic"),
                   FeatureSpec.from_dict(d["treatment"]) if "treatment" in d else FeatureSpec(("z1", "z2")),
                   FeatureSpec.from_dict(d["censoring"]) if "censoring" in d else FeatureSpec(("z1", "z2")),
                   HalConfig.from_dict(d["hal"]) if "hal" in d else HalConfig(),
                   bool(d.get("per_stage", False)), truth)


def _model_from_dict(d: dict):
    if d["type"] == "logistic":
        return LogisticModel.from_dict(d)
    if d["type"] == "hal":
        return hal.HalModel.from_dict(d)
    raise ValueError(f"unknown model type {d['type']!r}")


@dataclass
class HazardFit:
    """A discrete hazard for one role.

    ``models`` maps a landmark to its model; key 0 holds the pooled model.
    The ``"none"`` kind is used when the risk set has no events (for example
    a panel without censoring) and predicts a hazard of exactly zero.
    """

    role: str
    kind: str
    features: FeatureSpec
    models: dict[int, object] = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    truth: TruthHazard | None = field(default=None, repr=False)

    def linear(self, panel: Panel, subject: np.ndarray, stage: np.ndarray) -> np.ndarray:
        X = self.features.matrix(panel, subject, stage)
        if 0 in self.models:
            return self.models[0].linear(X)
        out = np.empty(subject.size)
        for j in np.unique(stage):
            rows = stage == j
            model = self.models.get(int(j))
            if model is None:
                raise ValueError(f"{self.role} hazard has no model for landmark {int(j)}")
            out[rows] = model.linear(X[rows])
        return out

    def raw(self, panel: Panel, subject: np.ndarray, stage: np.ndarray) -> np.ndarray:
        """Untruncated hazard for (subject, landmark) pairs."""
        subject = np.asarray(subject, dtype=int)
        stage = np.asarray(stage, dtype=int)
        if self.kind == "none":
            return np.zeros(subject.size)
        if self.kind == "truth":
            return np.asarray(self.truth(self.role, panel, subject, stage), dtype=float)
        return expit(self.linear(panel, subject, stage))

    @property
    def truncated(self) -> bool:
        """Fitted hazards are truncated to [EPS, 1 - EPS]; known or zero hazards are used as given."""
        return self.kind in ("logistic", "hal")

    def predict(self, panel: Panel, subject: np.ndarray, stage: np.ndarray) -> np.ndarray:
        h = self.raw(panel, subject, stage)
        return np.clip(h, EPS, 1 - EPS) if self.truncated else h

    def to_dict(self) -> dict:
        if self.kind == "truth":
            raise ValueError("known-truth hazards are not serializable")
        return {"role": self.role, "kind": self.kind, "features": self.features.to_dict(),
                "models": {str(j): m.to_dict() for j, m in self.models.items()},
                "records": self.records}

    @classmethod
    def from_dict(cls, d: dict) -> "HazardFit":
        return cls(d["role"], d["kind"], FeatureSpec.from_dict(d["features"]),
                   {int(j): _model_from_dict(m) for j, m in d["models"].items()}, d.get("records", {}))


@dataclass
class NuisanceFits:
    treatment: HazardFit
    censoring: HazardFit
    recipe: NuisanceRecipe
    fitted_on: np.ndarray | None = None  # subject rows used, None = all

    def role(self, role: str) -> HazardFit:
        return self.treatment if role == TREATMENT else self.censoring

    def to_dict(self) -> dict:
        return {"recipe": self.recipe.to_dict(), "treatment": self.treatment.to_dict(),
                "censoring": self.censoring.to_dict(),
                "fitted_on": None if self.fitted_on is None else [int(i) for i in self.fitted_on]}

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceFits":
        rows = d.get("fitted_on")
        return cls(HazardFit.from_dict(d["treatment"]), HazardFit.from_dict(d["censoring"]),
                   NuisanceRecipe.from_dict(d["recipe"]), None if rows is None else np.asarray(rows, dtype=int))


# ---------------------------------------------------------------------------
# fitting


def _fit_hal_model(rows: RiskSet, config: HalConfig, seed: int, role: str):
    path = hal.fit_hal_path(rows.X, rows.response, groups=rows.subject, seed=seed,
                            cv_folds=config.cv_folds, n_lambda=config.n_lambda,
                            lambda_min_ratio=config.lambda_min_ratio, max_depth=config.max_depth,
                            max_knots_per_section=config.max_knots_per_section,
                            early_stop=config.early_stop, patience=config.patience)
    hal.select_undersmoothed(path, role=role, divisor=config.censoring_divisor)
    lam = path.lambda_selected if config.tuning == "undersmooth" else path.lambda_cv
    model = path.model(lam, rows.feature_names).compact()
    records = {
        "lambda_cv": path.lambda_cv, "lambda_tilde": path.lambda_tilde,
        "lambda_floor": path.lambda_floor, "lambda_selected": path.lambda_selected,
        "lambda_used": float(model.lam), "tuning": config.tuning,
        "active_cv": int(path.active[path.index(path.lambda_cv)]),
        "active_used": model.active_count, "basis_size": path.basis.size,
        "grid_start": float(path.grid[0]), "grid_end": float(path.grid[-1]),
        "grid_points_solved": int(path.lambdas.size), "rows": int(path.n),
    }
    return model, records


def _fit_one(rows: RiskSet, kind: str, config: HalConfig, seed: int, role: str):
    if kind == "logistic":
        model = fit_logistic(rows.X, rows.response, rows.feature_names)
        return model, {"iterations": model.iterations, "converged": model.converged, "rows": len(rows)}
    return _fit_hal_model(rows, config, seed, role)


def fit_hazard(panel: Panel, role: str, recipe: NuisanceRecipe, seed: int = 0) -> HazardFit:
    """Fit one hazard on every at-risk row of ``panel``."""
    if role not in ROLES:
        raise ValueError(f"unknown hazard role {role!r}")
    spec = recipe.spec(role)
    if recipe.kind == "truth":
        return HazardFit(role, "truth", spec, truth=recipe.truth)
    if recipe.per_stage:
        spec = replace(spec, stage_degree=0)
    rows = build_risk_rows(panel, role, spec)
    if len(rows) == 0 or rows.response.max() == 0:
        # The likelihood is maximized on the boundary: a hazard of zero.
        if role == CENSORING:
            log.info("no censoring events in the risk set; censoring hazard set to zero")
        else:
            log.warning("no treatment initiations in the risk set; treatment hazard set to zero")
        return HazardFit(role, "none", spec, records={"rows": len(rows)})
    if not recipe.per_stage:
        model, rec = _fit_one(rows, recipe.kind, recipe.hal, seed, role)
        return HazardFit(role, recipe.kind, spec, {0: model}, {"pooled": rec})
    models, records = {}, {}
    for j in range(1, panel.K + 1):
        sub = rows.take(rows.stage == j)
        if len(sub) == 0:
            continue
        if sub.response.min() == sub.response.max():
            raise ValueError(f"{role} risk set at landmark {j} has a single response class; "
                             "use pooled fitting")
        models[j], records[str(j)] = _fit_one(sub, recipe.kind, recipe.hal, seed + j, role)
    return HazardFit(role, recipe.kind, spec, models, records)


def fit_hazards(panel: Panel, recipe: NuisanceRecipe, subjects=None, seed: int = 0) -> NuisanceFits:
    """Fit both hazards, optionally on a subset of subject rows."""
    sub = panel if subjects is None else panel.take(np.asarray(subjects))
    treatment = fit_hazard(sub, TREATMENT, recipe, seed)
    censoring = fit_hazard(sub, CENSORING, recipe, seed + 1)
    return NuisanceFits(treatment, censoring, recipe, None if subjects is None else np.asarray(subjects))


def predict_hazard(fit: HazardFit, panel: Panel, subject, stage) -> np.ndarray:
    return fit.predict(panel, np.atleast_1d(subject), np.atleast_1d(stage))


# ---------------------------------------------------------------------------
# cumulative weights


@dataclass
class CumulativeFactors:
    """Running products of assignment and uncensored probabilities.

    ``Ha[i, l]`` and ``Hc[i, l]`` hold the products over landmarks 1..l
    (column 0 is 1), floored at ``EPS_H``.  Entries past a subject's last
    observed landmark repeat the last value and are never used.
    """

    Ha: np.ndarray
    Hc: np.ndarray
    diagnostics: dict


def _truncation_count(fit: HazardFit, raw: np.ndarray) -> int:
    if not fit.truncated:
        return 0
    return int(np.sum((raw < EPS) | (raw > 1 - EPS)))


def cumulative_factors(panel: Panel, fits: NuisanceFits) -> CumulativeFactors:
    n, k1 = panel.a.shape
    fa = np.ones((n, k1))
    fc = np.ones((n, k1))

    subject, stage = at_risk_pairs(panel, TREATMENT)
    raw_a = fits.treatment.raw(panel, subject, stage)
    h = np.clip(raw_a, EPS, 1 - EPS) if fits.treatment.truncated else raw_a
    fa[subject, stage] = np.where(panel.a[subject, stage] == 1, h, 1 - h)

    subject, stage = at_risk_pairs(panel, CENSORING)
    raw_c = fits.censoring.raw(panel, subject, stage)
    hc = np.clip(raw_c, EPS, 1 - EPS) if fits.censoring.truncated else raw_c
    fc[subject, stage] = 1 - hc

    Ha = np.cumprod(fa, axis=1)
    Hc = np.cumprod(fc, axis=1)
    floored_a = Ha < EPS_H
    floored_c = Hc < EPS_H
    diagnostics = {
        "hazard_truncated_treatment": _truncation_count(fits.treatment, raw_a),
        "hazard_truncated_censoring": _truncation_count(fits.censoring, raw_c),
        "cumulative_floored_treatment": int(floored_a.sum()),
        "cumulative_floored_censoring": int(floored_c.sum()),
    }
    if any(diagnostics.values()):
        log.debug("weight truncation active: %s", diagnostics)
    return CumulativeFactors(np.maximum(Ha, EPS_H), np.maximum(Hc, EPS_H), diagnostics)


def cumulative_weights(panel: Panel, fits: NuisanceFits, l_x: np.ndarray,
                       factors: CumulativeFactors | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject ``(H_a(x), H_c(x))`` given each subject's last landmark ``l_x``."""
    factors = cumulative_factors(panel, fits) if factors is None else factors
    rows = np.arange(panel.n)
    l_x = np.asarray(l_x, dtype=int)
    return factors.Ha[rows, l_x], factors.Hc[rows, l_x]
