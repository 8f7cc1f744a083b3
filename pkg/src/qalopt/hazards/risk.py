"""Risk sets for the treatment-initiation and censoring hazards."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..panel import Panel

log = logging.getLogger(__name__)

TREATMENT = "treatment"
CENSORING = "censoring"
ROLES = (TREATMENT, CENSORING)


@dataclass(frozen=True)
class FeatureSpec:
    """Which history features enter a hazard model.

    Stage terms are powers of ``j / K`` (scaled to keep the design well
    conditioned).  ``include_treatment`` adds the current treatment, which
    is only meaningful for the censoring hazard.
    """

    covariates: tuple[str, ...] = ()
    stage_degree: int = 3
    include_treatment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.stage_degree < 0:
            raise ValueError("stage_degree must be >= 0")

    @property
    def names(self) -> list[str]:
        stage = ["stage"] + [f"stage^{p}" for p in range(2, self.stage_degree + 1)]
        out = stage[: self.stage_degree] + list(self.covariates)
        if self.include_treatment:
            out.append("a")
        return out

    def matrix(self, panel: Panel, subject: np.ndarray, stage: np.ndarray) -> np.ndarray:
        """Feature rows for (subject, landmark) pairs."""
        cols = []
        frac = stage / max(panel.K, 1)
        for p in range(1, self.stage_degree + 1):
            cols.append(frac ** p)
        for name in self.covariates:
            cols.append(panel.covariate(name)[subject, stage])
        if self.include_treatment:
            cols.append(panel.a[subject, stage])
        X = np.column_stack(cols) if cols else np.empty((subject.size, 0))
        if np.any(np.isnan(X)):
            raise ValueError("missing history features in risk set")
        return X

    def to_dict(self) -> dict:
        return {"covariates": list(self.covariates), "stage_degree": self.stage_degree,
                "include_treatment": self.include_treatment}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(tuple(d["covariates"]), int(d["stage_degree"]), bool(d["include_treatment"]))


@dataclass(frozen=True)
class RiskSet:
    """Columnar risk-set rows: one per (subject, landmark) at risk for the event."""

    role: str
    subject: np.ndarray
    stage: np.ndarray
    X: np.ndarray
    response: np.ndarray
    feature_names: list[str]
    empty_stages: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.subject.size

    def take(self, mask) -> "RiskSet":
        return RiskSet(self.role, self.subject[mask], self.stage[mask], self.X[mask],
                       self.response[mask], self.feature_names)


def at_risk_pairs(panel: Panel, role: str) -> tuple[np.ndarray, np.ndarray]:
    """(subject, landmark) index pairs at risk for the event, landmarks 1..K."""
    if role not in ROLES:
        raise ValueError(f"unknown hazard role {role!r}")
    at_risk = panel.y.astype(bool).copy()
    at_risk[:, 0] = False
    if role == TREATMENT:
        prev = np.zeros_like(panel.a)
        prev[:, 1:] = panel.a[:, :-1]
        at_risk &= prev == 0
    subject, stage = np.nonzero(at_risk)
    return subject, stage


def censoring_response(panel: Panel, subject: np.ndarray, stage: np.ndarray) -> np.ndarray:
    """Indicator of observed censoring in [l_j, l_{j+1})."""
    nxt = np.append(panel.landmarks.times[1:], np.inf)
    C = panel.censor_time[subject]
    censored = panel.event_observed[subject] == 0
    return (censored & (C < nxt[stage])).astype(float)


def build_risk_rows(panel: Panel, role: str, spec: FeatureSpec) -> RiskSet:
    subject, stage = at_risk_pairs(panel, role)
    if role == TREATMENT:
        response = panel.a[subject, stage].astype(float)
    else:
        response = censoring_response(panel, subject, stage)
    X = spec.matrix(panel, subject, stage)
    counts = np.bincount(stage, minlength=panel.K + 1)
    empty = [j for j in range(1, panel.K + 1) if counts[j] == 0]
    if empty:
        log.warning("%s risk set empty at landmarks %s", role, empty)
    return RiskSet(role, subject, stage, X, response, spec.names, empty)
