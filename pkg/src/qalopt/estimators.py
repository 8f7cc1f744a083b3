"""Weighted estimating-equation estimators of the quality-adjusted survival curve and RQAL.

For a target ``x`` each subject carries the weight
``w(x) = compliance(x) * delta_c(x) / (H_a(x) * H_c(x))`` and the survival
probability is the weighted fraction with ``U > x``.  The restricted mean
(RQAL) integrates that ratio from 0 to ``L_U``.

Weights are piecewise constant in ``x``: they change only where a
subject's last landmark ``l(x)`` increments (the cumulative quality at a
landmark) and at the subject's observed quality-adjusted lifetime.
``RqalEvaluator`` precomputes these pieces so that the integral is exact
for the step estimator and a new regime costs a few vector operations.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.stats import norm

from .hazards.fit import CumulativeFactors, NuisanceFits, NuisanceRecipe, cumulative_factors, fit_hazards
from .panel import Panel, derive_targets, landmark_qal, observed_qal
from .regimes import (DegenerateScores, Regime, cumulative_compliance, cumulative_smooth_compliance,
                      default_bandwidth, landmark_scores, regime_design)

log = logging.getLogger(__name__)

IPW = "ipw"
BC = "bc"
MODES = (IPW, BC)


class NoEffectiveObservations(ValueError):
    """The weights sum to zero at some target quality-adjusted time."""


# ---------------------------------------------------------------------------
# mode and bandwidth


def resolve_mode(panel: Panel, regime: Regime, mode: str, nu: float | str | None) -> tuple[str, float | None, str]:
    """Settle the compliance mode and bandwidth.

    Returns ``(mode, nu, note)``.  In BC mode with an automatic bandwidth a
    degenerate score distribution (e.g. an intercept-only rule) falls back
    to IPW, since smoothing a constant score changes nothing.
    """
    if mode not in MODES:
        raise ValueError(f"unknown estimator mode {mode!r}; expected one of {MODES}")
    if mode == IPW:
        return IPW, None, ""
    if nu is None or nu == "auto":
        try:
            return BC, default_bandwidth(panel, regime), ""
        except DegenerateScores:
            log.warning("ν undefined; falling back to IPW")
            return IPW, None, "bandwidth undefined for degenerate scores; fell back to IPW"
    nu = float(nu)
    if not nu > 0:
        raise ValueError("bandwidth must be positive")
    return BC, nu, ""


def compliance_matrix(panel: Panel, regime: Regime, mode: str, nu: float | None,
                      design: np.ndarray | None = None) -> np.ndarray:
    """Cumulative (hard or smoothed) compliance through each landmark, shape (n, K+1)."""
    if design is None:
        design = regime_design(panel, regime.covariates)
    scores = landmark_scores(design, regime.eta)
    if mode == IPW:
        return cumulative_compliance(scores, panel.a)
    return cumulative_smooth_compliance(scores, panel.a, nu)


# ---------------------------------------------------------------------------
# pointwise estimator


@dataclass(frozen=True)
class WeightBundle:
    x: float
    mode: str
    delta_a: np.ndarray
    delta_c: np.ndarray
    H_a: np.ndarray
    H_c: np.ndarray
    w: np.ndarray
    indicator: np.ndarray


def survival_at(panel: Panel, fits: NuisanceFits | None, regime: Regime, x: float, mode: str = IPW,
                nu: float | str | None = None, factors: CumulativeFactors | None = None
                ) -> tuple[float, WeightBundle]:
    """Weighted fraction of subjects with quality-adjusted lifetime above ``x``."""
    if factors is None:
        factors = cumulative_factors(panel, fits)
    mode, nu, _ = resolve_mode(panel, regime, mode, nu)
    targets = derive_targets(panel, x)
    rows = np.arange(panel.n)
    cc = compliance_matrix(panel, regime, mode, nu)
    delta_a = cc[rows, targets.l_x]
    H_a = factors.Ha[rows, targets.l_x]
    H_c = factors.Hc[rows, targets.l_x]
    delta_c = targets.delta_c.astype(float)
    w = delta_a * delta_c / (H_a * H_c)
    indicator = (targets.U > x).astype(float)
    total = w.sum()
    if not total > 0:
        raise NoEffectiveObservations(f"no effective observations at x = {x}")
    S = float(np.sum(w * indicator) / total)
    return S, WeightBundle(float(x), mode, delta_a, delta_c, H_a, H_c, w, indicator)


@dataclass(frozen=True)
class SurvCurve:
    grid: np.ndarray
    S: np.ndarray
    effective_n: np.ndarray
    mode: str
    isotonic: bool = False

    def to_rows(self) -> list[tuple[float, float, float]]:
        return [(float(x), float(s), float(e)) for x, s, e in zip(self.grid, self.S, self.effective_n)]


def survival_curve(panel: Panel, fits: NuisanceFits | None, regime: Regime, grid: Sequence[float],
                   mode: str = IPW, nu: float | str | None = None, isotonic: bool = False,
                   factors: CumulativeFactors | None = None) -> SurvCurve:
    """Pointwise estimates over ``grid``; optionally projected to be nonincreasing."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be nonempty and sorted")
    if factors is None:
        factors = cumulative_factors(panel, fits)
    mode, nu, _ = resolve_mode(panel, regime, mode, nu)
    S = np.empty(grid.size)
    eff = np.empty(grid.size)
    for k, x in enumerate(grid):
        S[k], bundle = survival_at(panel, None, regime, x, mode, nu, factors)
        eff[k] = bundle.w.sum()
    if isotonic:
        S = isotonic_regression(S, weights=eff, increasing=False).x
    return SurvCurve(grid, S, eff, mode, isotonic)


# ---------------------------------------------------------------------------
# restricted mean


def conservative_variance(grid: np.ndarray, weights: np.ndarray, indicators: np.ndarray) -> float:
    """Standard error from the integrated, weight-normalized residuals.

    ``weights`` and ``indicators`` have shape (n, m): values on the m
    intervals ``[grid[k], grid[k+1])``.  Each subject contributes
    ``int w_i(x) {I_i(x) - S(x)} / mean_j w_j(x) dx``.
    """
    grid = np.asarray(grid, dtype=float)
    weights = np.asarray(weights, dtype=float)
    indicators = np.asarray(indicators, dtype=float)
    n = weights.shape[0]
    dx = np.diff(grid)
    mean_w = weights.mean(0)
    S = (weights * indicators).mean(0) / mean_w
    ic = (weights * (indicators - S[None, :]) / mean_w[None, :]) @ dx
    return float(np.sqrt(np.mean(ic ** 2) / n))


@dataclass
class RqalEstimate:
    value: float
    se: float
    ci: tuple[float, float]
    mode: str
    nuisance: str
    L_U: float
    grid_size: int
    regime: Regime
    nu: float | None = None
    note: str = ""
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se, "ci": list(self.ci), "mode": self.mode,
                "nuisance": self.nuisance, "L_U": self.L_U, "grid_size": self.grid_size,
                "regime": self.regime.to_dict(), "nu": self.nu, "note": self.note,
                "diagnostics": self.diagnostics}


@dataclass(frozen=True)
class RqalCurve:
    """The step estimate on the exact breakpoint grid."""

    grid: np.ndarray  # m + 1 points from 0 to L_U
    S: np.ndarray  # m interval values
    weight_sum: np.ndarray  # m interval values
    value: float
    ic: np.ndarray | None = None  # per-subject integrated residuals

    @property
    def se(self) -> float:
        if self.ic is None:
            return float("nan")
        return float(np.sqrt(np.mean(self.ic ** 2) / self.ic.size))


class RqalEvaluator:
    """Fast RQAL evaluation for many regimes on one panel and one set of weights.

    Every subject is split into x-pieces on which its last landmark and its
    indicators are constant: pieces ``[Q_j, Q_{j+1})`` for landmarks
    ``j < l_max`` (``Q_j`` is the cumulative quality at landmark ``j``),
    the piece ``[Q_{l_max}, U)`` and, for uncensored subjects, ``[U, inf)``
    where the subject stays in the denominator only.
    """

    def __init__(self, panel: Panel, factors: CumulativeFactors, L_U: float):
        if not L_U > 0:
            raise ValueError("L_U must be positive")
        self.panel = panel
        self.factors = factors
        self.L_U = float(L_U)
        n, k1 = panel.a.shape
        K = k1 - 1
        U = observed_qal(panel)
        Q = landmark_qal(panel)
        lmax = panel.y.sum(1).astype(int) - 1
        delta = panel.event_observed.astype(float)

        sub, lj = np.nonzero(np.arange(k1)[None, :] <= lmax[:, None])
        start = Q[sub, lj]
        end = np.where(lj < lmax[sub], Q[sub, np.minimum(lj + 1, K)], U[sub])
        main = (end > start) & (start < self.L_U)
        sub, lj, start, end = sub[main], lj[main], start[main], end[main]
        fin = np.nonzero((delta == 1) & (U < self.L_U))[0]

        self.sub = np.concatenate([sub, fin])
        self.l = np.concatenate([lj, lmax[fin]])
        self.n_coef = np.concatenate([np.ones(sub.size), np.zeros(fin.size)])
        starts = np.concatenate([start, U[fin]])
        ends = np.minimum(np.concatenate([end, np.full(fin.size, np.inf)]), self.L_U)
        self.grid = np.unique(np.concatenate([[0.0, self.L_U], starts, ends]))
        self.grid = self.grid[self.grid <= self.L_U]
        self.i_start = np.searchsorted(self.grid, starts)
        self.i_end = np.searchsorted(self.grid, ends)
        self.dx = np.diff(self.grid)
        self.inv_H = 1.0 / (factors.Ha[self.sub, self.l] * factors.Hc[self.sub, self.l])
        self._designs: dict[tuple[str, ...], np.ndarray] = {}

    @property
    def n(self) -> int:
        return self.panel.n

    def design(self, covariates: tuple[str, ...]) -> np.ndarray:
        if covariates not in self._designs:
            self._designs[covariates] = regime_design(self.panel, covariates)
        return self._designs[covariates]

    def piece_weights(self, regime: Regime, mode: str, nu: float | None) -> np.ndarray:
        cc = compliance_matrix(self.panel, regime, mode, nu, self.design(regime.covariates))
        return cc[self.sub, self.l] * self.inv_H

    def curve(self, regime: Regime, mode: str = IPW, nu: float | None = None, with_ic: bool = True) -> RqalCurve:
        w = self.piece_weights(regime, mode, nu)
        g = self.grid.size
        wn = w * self.n_coef
        N = np.cumsum(np.bincount(self.i_start, wn, g) - np.bincount(self.i_end, wn, g))[:-1]
        D = np.cumsum(np.bincount(self.i_start, w, g) - np.bincount(self.i_end, w, g))[:-1]
        scale = max(float(np.max(np.abs(w), initial=0.0)), 1e-300)
        empty = (D <= 1e-12 * scale) & (self.dx > 0)
        if np.any(empty):
            x = float(self.grid[:-1][empty][0])
            raise NoEffectiveObservations(f"no effective observations at x = {x:.6g}")
        D = np.where(D > 0, D, np.inf)
        S = np.clip(N / D, 0.0, 1.0)
        value = float(np.dot(self.dx, S))
        ic = None
        if with_ic:
            mean_d = D / self.n
            F1 = np.concatenate([[0.0], np.cumsum(self.dx / mean_d)])
            F2 = np.concatenate([[0.0], np.cumsum(self.dx * S / mean_d)])
            piece = wn * (F1[self.i_end] - F1[self.i_start]) - w * (F2[self.i_end] - F2[self.i_start])
            ic = np.bincount(self.sub, piece, self.n)
        return RqalCurve(self.grid, S, D, value, ic)

    def value(self, regime: Regime, mode: str = IPW, nu: float | None = None) -> float:
        return self.curve(regime, mode, nu, with_ic=False).value

    def estimate(self, regime: Regime, mode: str = IPW, nu: float | str | None = None,
                 nuisance: str = "", level: float = 0.95) -> RqalEstimate:
        mode, nu, note = resolve_mode(self.panel, regime, mode, nu)
        c = self.curve(regime, mode, nu)
        se = c.se
        z = float(norm.ppf(0.5 + level / 2))
        return RqalEstimate(c.value, se, (c.value - z * se, c.value + z * se), mode, nuisance, self.L_U,
                            int(self.grid.size), regime, nu, note, dict(self.factors.diagnostics))


def rqal(panel: Panel, fits: NuisanceFits, regime: Regime, L_U: float, mode: str = IPW,
         nu: float | str | None = None) -> RqalEstimate:
    """Restricted mean quality-adjusted lifetime under ``regime`` with conservative SE."""
    evaluator = RqalEvaluator(panel, cumulative_factors(panel, fits), L_U)
    return evaluator.estimate(regime, mode, nu, fits.recipe.kind)


def rqal_pointwise(panel: Panel, fits: NuisanceFits | None, regime: Regime, L_U: float, mode: str = IPW,
                   nu: float | None = None, factors: CumulativeFactors | None = None) -> tuple[float, float]:
    """Reference evaluation: pointwise estimates at each interval midpoint, summed.

    Slow; used to cross-check ``RqalEvaluator``.  Returns (value, SE).
    """
    if factors is None:
        factors = cumulative_factors(panel, fits)
    grid = RqalEvaluator(panel, factors, L_U).grid
    W, I = [], []
    for x in (grid[:-1] + grid[1:]) / 2:
        _, b = survival_at(panel, None, regime, x, mode, nu, factors)
        W.append(b.w)
        I.append(b.indicator)
    W = np.array(W).T
    I = np.array(I).T
    S = (W * I).sum(0) / W.sum(0)
    return float(np.dot(np.diff(grid), S)), conservative_variance(grid, W, I)


def default_LU(panel: Panel, quantile: float = 0.95) -> float:
    """Empirical quantile (linear interpolation) of the observed quality-adjusted lifetime."""
    if panel.n < 20:
        raise ValueError("default L_U needs at least 20 subjects")
    return float(np.quantile(observed_qal(panel), quantile))


# ---------------------------------------------------------------------------
# cross-fitting and bootstrap


def fold_labels(n: int, folds: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.permutation(n) % folds


def cross_fit_factors(panel: Panel, recipe: NuisanceRecipe, folds: int = 5, seed: int = 0
                      ) -> tuple[CumulativeFactors, list[NuisanceFits]]:
    """Cumulative factors where each subject's hazards come from fits excluding its fold."""
    if folds < 2:
        raise ValueError("cross-fitting needs at least 2 folds")
    labels = fold_labels(panel.n, folds, seed)
    Ha = np.empty(panel.a.shape)
    Hc = np.empty(panel.a.shape)
    diagnostics: dict[str, int] = {}
    fitted = []
    for b in range(folds):
        held = np.nonzero(labels == b)[0]
        train = np.nonzero(labels != b)[0]
        if held.size == 0:
            raise ValueError(f"fold {b} is empty")
        try:
            fits = fit_hazards(panel, recipe, subjects=train, seed=seed + 10 * b)
        except ValueError as exc:
            raise ValueError(f"fold {b}: {exc}") from exc
        fitted.append(fits)
        part = cumulative_factors(panel.take(held), fits)
        Ha[held] = part.Ha
        Hc[held] = part.Hc
        for k, v in part.diagnostics.items():
            diagnostics[k] = diagnostics.get(k, 0) + v
    return CumulativeFactors(Ha, Hc, diagnostics), fitted


def cross_fit_estimate(panel: Panel, recipe: NuisanceRecipe, regime: Regime, L_U: float, folds: int = 5,
                       seed: int = 0, mode: str = IPW, nu: float | str | None = None) -> RqalEstimate:
    """Pooled-ratio RQAL with hazards fitted on the complement of each subject's fold."""
    factors, _ = cross_fit_factors(panel, recipe, folds, seed)
    est = RqalEvaluator(panel, factors, L_U).estimate(regime, mode, nu, recipe.kind)
    est.diagnostics["cross_fit_folds"] = folds
    return est


@dataclass
class BootstrapResult:
    ci: tuple[float, float]
    values: np.ndarray
    failures: list[str]
    reps: int


def bootstrap_ci(panel: Panel, pipeline: Callable[[Panel, int], float], reps: int = 200, seed: int = 0,
                 level: float = 0.95, workers: int = 1, max_failure_rate: float = 0.10) -> BootstrapResult:
    """Percentile interval from rerunning ``pipeline(resampled_panel, replicate_seed)``.

    Replicate resamples and seeds derive from ``seed`` alone, so the result
    does not depend on ``workers``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if reps < 100:
        log.warning("bootstrap with %d replicates; at least 100 are recommended", reps)
    children = np.random.SeedSequence(seed).spawn(reps)

    def run(b):
        rng = np.random.default_rng(children[b])
        idx = rng.integers(0, panel.n, panel.n)
        rep_seed = int(rng.integers(0, 2 ** 31 - 1))
        try:
            return float(pipeline(panel.take(idx), rep_seed)), None
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            return np.nan, f"replicate {b}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(run, range(reps)))
    else:
        out = [run(b) for b in range(reps)]
    values = np.array([v for v, _ in out])
    failures = [f for _, f in out if f]
    if len(failures) > max_failure_rate * reps:
        raise RuntimeError(f"{len(failures)} of {reps} bootstrap replicates failed:\n" + "\n".join(failures))
    ok = values[np.isfinite(values)]
    alpha = (1 - level) / 2
    lo, hi = np.quantile(ok, [alpha, 1 - alpha])
    return BootstrapResult((float(lo), float(hi)), values, failures, reps)
