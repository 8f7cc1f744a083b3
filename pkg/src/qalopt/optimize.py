"""Derivative-free maximization of a regime objective over the unit sphere.

The search is a real-coded genetic algorithm: candidates are raw vectors
that are normalized before every evaluation; parents are chosen by
tournament, combined by blend crossover and perturbed by Gaussian
mutation, and the best candidates survive unchanged.  Every offspring draws
from its own random stream spawned from the generation seed, so the result
does not depend on how fitness evaluations are scheduled.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .estimators import IPW, RqalEstimate, RqalEvaluator, resolve_mode, survival_at
from .panel import Panel
from .regimes import Regime

log = logging.getLogger(__name__)

Objective = Callable[[Regime], float]


class SearchFailed(RuntimeError):
    """No candidate produced a finite objective value."""


@dataclass(frozen=True)
class SearchConfig:
    population: int = 60
    generations: int = 80
    mutation_scale: float = 0.2
    mutation_decay: float = 0.97
    elite_fraction: float = 0.1
    tournament: int = 3
    blend_alpha: float = 0.5
    seed: int = 0
    polish: bool = True
    polish_max_evals: int = 400
    objective: str = "rqal"  # or "survival"
    mode: str = IPW
    x: float | None = None  # target for the survival objective
    workers: int = 1

    def __post_init__(self):
        if self.population < 8:
            raise ValueError("population must be >= 8")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 0 < self.elite_fraction < 1:
            raise ValueError("elite_fraction must be in (0, 1)")
        if self.objective not in ("rqal", "survival"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "survival" and self.x is None:
            raise ValueError("the survival objective needs a target x")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        return cls(**d)


@dataclass
class SearchResult:
    regime: Regime
    value: float
    trace: list[tuple[int, float, float]]
    evaluations: int
    polished: bool = False

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["generation", "best", "mean"])
            for g, best, mean in self.trace:
                w.writerow([g, repr(best), repr(mean)])


class _CachedObjective:
    """Objective on normalized vectors, cached on a 1e-10 grid; failures score -inf."""

    def __init__(self, objective: Objective, covariates: tuple[str, ...]):
        self.objective = objective
        self.covariates = covariates
        self.cache: dict[bytes, float] = {}
        self.calls = 0

    def __call__(self, v: np.ndarray) -> float:
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0:
            return -np.inf
        eta = v / norm
        key = np.round(eta * 1e10).astype(np.int64).tobytes()
        if key not in self.cache:
            self.calls += 1
            try:
                val = float(self.objective(Regime(eta, self.covariates)))
            except (ValueError, FloatingPointError, ZeroDivisionError, np.linalg.LinAlgError) as exc:
                log.debug("objective failed at %s: %s", eta, exc)
                val = -np.inf
            self.cache[key] = val if np.isfinite(val) else -np.inf
        return self.cache[key]


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def maximize(objective: Objective, covariates: Sequence[str], config: SearchConfig = SearchConfig(),
             initial: Sequence[np.ndarray] = ()) -> SearchResult:
    """Maximize ``objective(Regime)`` over unit-norm coefficient vectors."""
    covariates = tuple(covariates)
    d = len(covariates)
    f = _CachedObjective(objective, covariates)

    if d == 1:
        vals = [(f(np.array([1.0])), 1.0), (f(np.array([-1.0])), -1.0)]
        best, sign = max(vals, key=lambda t: t[0])
        if not np.isfinite(best):
            raise SearchFailed("objective is -inf at both signs")
        finite = [v for v, _ in vals if np.isfinite(v)]
        return SearchResult(Regime(np.array([sign]), covariates), best, [(0, best, float(np.mean(finite)))],
                            f.calls)

    root = np.random.SeedSequence(config.seed)
    init_seq, gen_seq = root.spawn(2)
    rng0 = np.random.default_rng(init_seq)
    P = config.population
    pop = rng0.standard_normal((P, d))
    for k, v in enumerate(initial):
        if k < P:
            pop[k] = np.asarray(v, dtype=float)
    pop = np.array([_normalize(v) for v in pop])

    def evaluate(vectors):
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as ex:
                return np.array(list(ex.map(f, vectors)))
        return np.array([f(v) for v in vectors])

    fit = evaluate(pop)
    n_elite = max(1, int(round(config.elite_fraction * P)))
    trace = []
    gen_seeds = gen_seq.spawn(config.generations)
    scale = config.mutation_scale
    for g in range(config.generations):
        order = np.argsort(-fit, kind="stable")
        finite = fit[np.isfinite(fit)]
        trace.append((g, float(fit[order[0]]), float(finite.mean()) if finite.size else -np.inf))
        elites = pop[order[:n_elite]]
        children = []
        for child_seq in gen_seeds[g].spawn(P - n_elite):
            r = np.random.default_rng(child_seq)
            parents = []
            for _ in range(2):
                entrants = r.integers(0, P, config.tournament)
                parents.append(pop[entrants[np.argmax(fit[entrants])]])
            u = r.uniform(-config.blend_alpha, 1 + config.blend_alpha, d)
            child = parents[0] + u * (parents[1] - parents[0])
            child = _normalize(child) + scale * r.standard_normal(d)
            children.append(_normalize(child))
        children = np.array(children)
        pop = np.vstack([elites, children])
        fit = np.concatenate([fit[order[:n_elite]], evaluate(children)])
        scale *= config.mutation_decay
    order = np.argsort(-fit, kind="stable")
    finite = fit[np.isfinite(fit)]
    trace.append((config.generations, float(fit[order[0]]), float(finite.mean()) if finite.size else -np.inf))
    best_v, best_f = pop[order[0]], float(fit[order[0]])
    if not np.isfinite(best_f):
        raise SearchFailed("every candidate produced a non-finite objective")

    polished = False
    if config.polish:
        res = minimize(lambda v: -f(v) if np.isfinite(f(v)) else 1e300, best_v, method="Nelder-Mead",
                       options={"maxfev": config.polish_max_evals, "xatol": 1e-6, "fatol": 1e-10})
        cand = _normalize(res.x)
        if f(cand) > best_f:
            best_v, best_f, polished = cand, f(cand), True
    return SearchResult(Regime(_normalize(best_v), covariates), best_f, trace, f.calls, polished)


# ---------------------------------------------------------------------------
# objectives built from an evaluator


def rqal_objective(evaluator: RqalEvaluator, mode: str = IPW, nu: float | str | None = None) -> Objective:
    """RQAL of a regime; in BC mode with an automatic bandwidth, the bandwidth follows the regime."""
    def objective(regime: Regime) -> float:
        m, bw, _ = resolve_mode(evaluator.panel, regime, mode, nu)
        return evaluator.value(regime, m, bw)
    return objective


def survival_objective(panel: Panel, factors, x: float, mode: str = IPW, nu=None) -> Objective:
    def objective(regime: Regime) -> float:
        return survival_at(panel, None, regime, x, mode, nu, factors)[0]
    return objective


def optimize_regime(evaluator: RqalEvaluator, covariates: Sequence[str], config: SearchConfig = SearchConfig(),
                    nu: float | str | None = None, nuisance: str = "") -> tuple[SearchResult, RqalEstimate]:
    """Maximize the RQAL estimate and report it with its standard error at the maximizer."""
    if config.objective == "survival":
        obj = survival_objective(evaluator.panel, evaluator.factors, config.x, config.mode, nu)
    else:
        obj = rqal_objective(evaluator, config.mode, nu)
    result = maximize(obj, covariates, config)
    return result, evaluator.estimate(result.regime, config.mode, nu, nuisance)


# ---------------------------------------------------------------------------
# fixed regimes


@dataclass
class RegimeRow:
    name: str
    estimate: RqalEstimate

    def to_dict(self) -> dict:
        return {"name": self.name, **self.estimate.to_dict()}


def fixed_regimes_report(evaluator: RqalEvaluator, regimes: Sequence[tuple[str, Regime]], mode: str = IPW,
                         nu: float | str | None = None, nuisance: str = "") -> list[RegimeRow]:
    """RQAL and SE for each named regime.

    Intercept-only and other constant-score rules have no bandwidth, so BC
    mode falls back to IPW for them (noted in the row).
    """
    return [RegimeRow(name, evaluator.estimate(regime, mode, nu, nuisance)) for name, regime in regimes]


def standard_regimes() -> list[tuple[str, Regime]]:
    """Always-treat and never-treat rules expressed through the intercept."""
    return [("always", Regime(np.array([1.0]), ("intercept",))),
            ("never", Regime(np.array([-1.0]), ("intercept",)))]
