"""Monotone linear-score treatment rules and compliance indicators.

A rule initiates treatment the first time ``eta @ z_j >= 0`` and keeps it
on afterwards.  Compliance with a rule is the product of per-landmark
agreement indicators; the smoothed version replaces each indicator by a
normal-CDF approximation with bandwidth ``nu``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .panel import INTERCEPT, Panel, SubjectTrajectory, TargetDerived


class DegenerateScores(ValueError):
    """The linear scores have no spread, so no default bandwidth exists."""


@dataclass(frozen=True, eq=False)
class Regime:
    """Unit-norm coefficient vector over named covariates.

    ``covariates`` may contain ``"intercept"`` for a constant term.  The
    vector is normalized on construction; rescaling never changes a decision.
    """

    eta: np.ndarray
    covariates: tuple[str, ...] = (INTERCEPT, "z1", "z2")

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).ravel()
        if eta.size < 1:
            raise ValueError("regime needs at least one coefficient")
        if len(self.covariates) != eta.size:
            raise ValueError(f"regime has {eta.size} coefficients but {len(self.covariates)} covariates")
        norm = np.linalg.norm(eta)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("regime coefficients must be finite and not all zero")
        eta = eta / norm
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def __eq__(self, other):
        if not isinstance(other, Regime):
            return NotImplemented
        return self.covariates == other.covariates and np.array_equal(self.eta, other.eta)

    def __hash__(self):
        return hash((self.covariates, self.eta.tobytes()))

    @property
    def d(self) -> int:
        return self.eta.size

    def display_eta(self) -> np.ndarray:
        """Coefficients with a positive leading entry, for reporting only."""
        lead = self.eta[np.nonzero(self.eta)[0][0]]
        return self.eta if lead > 0 else -self.eta

    def to_dict(self) -> dict:
        return {"eta": [float(v) for v in self.eta], "covariates": list(self.covariates)}

    @classmethod
    def from_dict(cls, d: dict) -> "Regime":
        return cls(np.asarray(d["eta"], dtype=float), tuple(d["covariates"]))


def decide(regime: Regime, z_j: Sequence[float], a_prev: int) -> int:
    """Treatment the rule assigns at one landmark given the previous treatment."""
    z_j = np.asarray(z_j, dtype=float).ravel()
    if z_j.size != regime.d:
        raise ValueError(f"covariate vector has {z_j.size} entries, regime expects {regime.d}")
    if a_prev == 1:
        return 1
    return int(float(regime.eta @ z_j) >= 0.0)


def _trajectory_scores(regime: Regime, traj: SubjectTrajectory) -> np.ndarray:
    return traj.covariates(regime.covariates) @ regime.eta


def compliance(regime: Regime, traj: SubjectTrajectory, derived: TargetDerived) -> int:
    """Whether observed treatment agrees with the rule at landmarks 1..l_x."""
    z = traj.covariates(regime.covariates)
    for j in range(1, derived.l_x + 1):
        if int(traj.a[j]) != decide(regime, z[j], int(traj.a[j - 1])):
            return 0
    return 1


def smooth_compliance(regime: Regime, traj: SubjectTrajectory, derived: TargetDerived, nu: float) -> float:
    """Normal-CDF smoothed compliance with bandwidth ``nu``."""
    if not nu > 0:
        raise ValueError("bandwidth must be positive")
    scores = _trajectory_scores(regime, traj)
    value = 1.0
    for j in range(1, derived.l_x + 1):
        s = 1.0 if traj.a[j - 1] == 1 else scores[j]
        p = ndtr(s / nu)
        value *= p if traj.a[j] == 1 else 1.0 - p
    return float(value)


# ---------------------------------------------------------------------------
# vectorized forms used by the estimators


def regime_design(panel: Panel, covariates: Sequence[str]) -> np.ndarray:
    """Covariates used by a rule, shape (n, K+1, d)."""
    return panel.covariates(covariates)


def landmark_scores(design: np.ndarray, eta: np.ndarray) -> np.ndarray:
    return design @ eta


def decisions(scores: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Rule decisions along observed histories, shape (n, K+1); column 0 is 0."""
    prev = np.zeros_like(a)
    prev[:, 1:] = a[:, :-1]
    g = np.where(prev == 1, 1.0, (scores >= 0).astype(float))
    g[:, 0] = 0.0
    return g


def cumulative_compliance(scores: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Cumulative agreement through landmark j, shape (n, K+1); column 0 is 1.

    Positions after exit hold the value at exit and are never used.
    """
    g = decisions(scores, a)
    agree = (a == g) | np.isnan(a)
    agree[:, 0] = True
    return np.cumprod(agree, axis=1).astype(float)


def cumulative_smooth_compliance(scores: np.ndarray, a: np.ndarray, nu: float) -> np.ndarray:
    """Cumulative product of smoothed agreement weights, shape (n, K+1)."""
    prev = np.zeros_like(a)
    prev[:, 1:] = a[:, :-1]
    s = np.where(prev == 1, 1.0, scores)
    p = ndtr(s / nu)
    w = np.where(a == 1, p, 1.0 - p)
    w = np.where(np.isnan(a), 1.0, w)
    w[:, 0] = 1.0
    return np.cumprod(w, axis=1)


def default_bandwidth(panel: Panel, regime: Regime) -> float:
    """``n^(-1/3) * sd(scores) / K`` over observed post-baseline landmarks."""
    scores = landmark_scores(regime_design(panel, regime.covariates), regime.eta)
    observed = panel.y.astype(bool).copy()
    observed[:, 0] = False
    vals = scores[observed]
    vals = vals[np.isfinite(vals)]
    return bandwidth_from_scores(vals, panel.n, panel.K)


def bandwidth_from_scores(values: np.ndarray, n: int, K: int) -> float:
    if values.size < 2:
        raise DegenerateScores("degenerate score distribution: fewer than two observed scores")
    sd = float(np.std(values, ddof=1))
    if not sd > 1e-12 * max(1.0, float(np.max(np.abs(values)))):
        raise DegenerateScores("degenerate score distribution")
    return n ** (-1.0 / 3.0) * sd / max(K, 1)


def follows_regime(regime: Regime, traj: SubjectTrajectory) -> bool:
    """Agreement with the rule at every observed post-baseline landmark."""
    observed = int(np.sum(traj.y)) - 1
    z = traj.covariates(regime.covariates)
    return all(int(traj.a[j]) == decide(regime, z[j], int(traj.a[j - 1])) for j in range(1, observed + 1))
