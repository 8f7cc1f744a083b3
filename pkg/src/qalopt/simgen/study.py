"""Replicate studies: optimal-regime estimation and undersmoothing comparisons.

Each replicate's panel and every random choice inside it derive from
``(cfg.seed, replicate)``, so serial, parallel and resumed runs produce the
same per-replicate records; aggregation is a reduction in replicate order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from ..estimators import BC, IPW, RqalEvaluator
from ..hazards.fit import HalConfig, NuisanceRecipe, cumulative_factors, fit_hazards
from ..hazards.risk import FeatureSpec
from ..io import dump_json, json_default
from ..optimize import SearchConfig, maximize, rqal_objective
from .dgp import (ConfigError, SimConfig, TruthHazards, generate_panel, misclassification_rate, oracle_rqal,
                  replicate_seed)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "eta0", "eta0_sd", "eta1", "eta1_sd", "eta2", "eta2_sd", "R_hat", "R_hat_sd", "SE",
               "CP", "R_of_eta_hat", "R_of_eta_hat_sd", "MR", "MR_sd", "reps", "failures"]
MR_DEFINITION = "percent of at-risk landmark decisions (landmarks 1..K, optimal-rule histories) that disagree"


class StudyAborted(RuntimeError):
    """Too many replicates failed."""


def nuisance_features(cfg: SimConfig) -> tuple[str, ...]:
    """Covariates an analyst models: latent z for the correctly specified design, else the observed x."""
    return ("z1", "z2") if cfg.observed == "none" else ("x1", "x2")


def default_recipe(cfg: SimConfig, kind: str, tuning: str = "undersmooth") -> NuisanceRecipe:
    spec = FeatureSpec(nuisance_features(cfg), stage_degree=0)
    truth = TruthHazards.from_config(cfg) if kind == "truth" else None
    return NuisanceRecipe(kind, spec, spec, HalConfig(tuning=tuning), truth=truth)


@dataclass(frozen=True)
class Method:
    """One arm of a study: nuisance recipe, estimator mode and search settings."""

    name: str
    recipe: NuisanceRecipe
    mode: str = IPW
    nu: float | str | None = "auto"
    search: SearchConfig = SearchConfig()

    def to_dict(self) -> dict:
        return {"name": self.name, "recipe": self.recipe.to_dict(), "mode": self.mode, "nu": self.nu,
                "search": self.search.to_dict()}


def standard_method(cfg: SimConfig, kind: str, mode: str = IPW, search: SearchConfig = SearchConfig()) -> Method:
    label = {"logistic": "Logit", "hal": "HAL", "truth": "Truth"}[kind]
    return Method(f"{label}-{mode.upper()}", default_recipe(cfg, kind), mode, "auto" if mode == BC else None,
                  replace(search, mode=mode))


def _derived_int(*entropy) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


def _ratios(eta: np.ndarray, truth: np.ndarray) -> list[float]:
    """(e0/e1, e1/e2, e2/e0) of the estimate divided by the same ratios of the truth."""
    idx = [(0, 1), (1, 2), (2, 0)]
    with np.errstate(divide="ignore", invalid="ignore"):
        return [float((eta[a] / eta[b]) / (truth[a] / truth[b])) for a, b in idx]


def run_replicate(cfg: SimConfig, methods: Sequence[Method], r: int, target: float,
                  eval_mc_n: int = 20_000) -> dict:
    """All methods on replicate ``r``; method failures are recorded, not raised."""
    panel = generate_panel(cfg, replicate_seed(cfg, r))
    truth = np.asarray(cfg.eta_opt, dtype=float)
    z = float(norm.ppf(0.975))
    out = {"replicate": r, "methods": {}}
    for m_idx, method in enumerate(methods):
        try:
            fits = fit_hazards(panel, method.recipe, seed=_derived_int(cfg.seed, r, m_idx, 1))
            ev = RqalEvaluator(panel, cumulative_factors(panel, fits), cfg.lu)
            search = replace(method.search, seed=_derived_int(cfg.seed, r, m_idx, 2))
            res = maximize(rqal_objective(ev, method.mode, method.nu), cfg.optimal_regime.covariates, search)
            est = ev.estimate(res.regime, method.mode, method.nu, method.recipe.kind)
            eta = res.regime.eta
            out["methods"][method.name] = {
                "eta": eta.tolist(),
                "ratios": _ratios(eta, truth),
                "R_hat": est.value,
                "se": est.se,
                "ci": [est.value - z * est.se, est.value + z * est.se],
                "covered": bool(abs(est.value - target) <= z * est.se),
                "R_of_eta_hat": oracle_rqal(cfg, eta, mc_n=eval_mc_n).value,
                "MR": misclassification_rate(cfg, eta, mc_n=eval_mc_n),
                "mode": est.mode,
                "nu": est.nu,
                "note": est.note,
                "diagnostics": est.diagnostics,
                "nuisance_records": {"treatment": fits.treatment.records, "censoring": fits.censoring.records},
                "evaluations": res.evaluations,
            }
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d, %s failed: %s", r, method.name, exc)
            out["methods"][method.name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


@dataclass
class McRow:
    method: str
    eta: list[float]
    eta_sd: list[float]
    R_hat: float
    R_hat_sd: float
    SE: float
    CP: float
    R_of_eta_hat: float
    R_of_eta_hat_sd: float
    MR: float
    MR_sd: float
    reps: int
    failures: int

    def csv_row(self) -> list:
        return [self.method, self.eta[0], self.eta_sd[0], self.eta[1], self.eta_sd[1], self.eta[2],
                self.eta_sd[2], self.R_hat, self.R_hat_sd, self.SE, self.CP, self.R_of_eta_hat,
                self.R_of_eta_hat_sd, self.MR, self.MR_sd, self.reps, self.failures]


def _sd(v: np.ndarray) -> float:
    return float(np.std(v, ddof=1)) if v.size > 1 else 0.0


def aggregate(method: str, records: list[dict]) -> McRow:
    ok = [r for r in records if "error" not in r]
    if not ok:
        nan = float("nan")
        return McRow(method, [nan] * 3, [nan] * 3, nan, nan, nan, nan, nan, nan, nan, nan, 0, len(records))
    ratios = np.array([r["ratios"] for r in ok])
    col = lambda k: np.array([r[k] for r in ok], dtype=float)
    R, Ro, mr = col("R_hat"), col("R_of_eta_hat"), col("MR")
    return McRow(method, ratios.mean(0).tolist(), [_sd(ratios[:, k]) for k in range(3)], float(R.mean()), _sd(R),
                 float(col("se").mean()), float(col("covered").mean()), float(Ro.mean()), _sd(Ro),
                 float(mr.mean()), _sd(mr), len(ok), len(records) - len(ok))


@dataclass
class McReport:
    config: SimConfig
    methods: list[Method]
    target: float
    target_mc_se: float
    rows: list[McRow]
    replicates: list[dict] = field(repr=False, default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self, method: str) -> McRow:
        return next(r for r in self.rows if r.method == method)

    def to_dict(self, detail: bool = True) -> dict:
        d = {"config": self.config.to_dict(), "methods": [m.to_dict() for m in self.methods],
             "target": self.target, "target_mc_se": self.target_mc_se,
             "rows": [asdict(r) for r in self.rows], "meta": self.meta}
        if detail:
            d["replicates"] = self.replicates
        return d

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([v if isinstance(v, str) else repr(v) for v in r.csv_row()])

    def write_json(self, path, detail: bool = True) -> None:
        dump_json(self.to_dict(detail), path)

    def table(self) -> str:
        head = f"{'method':<12} {'eta0':>11} {'eta1':>11} {'eta2':>11} {'R_hat':>13} {'SE':>5} {'CP':>5} " \
               f"{'R(eta_hat)':>13} {'MR':>13}"
        lines = [head]
        for r in self.rows:
            pm = lambda m, s: f"{m:.2f}({s:.2f})"
            lines.append(f"{r.method:<12} {pm(r.eta[0], r.eta_sd[0]):>11} {pm(r.eta[1], r.eta_sd[1]):>11} "
                         f"{pm(r.eta[2], r.eta_sd[2]):>11} {pm(r.R_hat, r.R_hat_sd):>13} {r.SE:5.2f} {r.CP:5.2f} "
                         f"{pm(r.R_of_eta_hat, r.R_of_eta_hat_sd):>13} {pm(r.MR, r.MR_sd):>13}")
        return "\n".join(lines)


def study_key(cfg: SimConfig, methods: Sequence[Method], eval_mc_n: int) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "methods": [m.to_dict() for m in methods],
                       "eval_mc_n": eval_mc_n}, sort_keys=True, default=json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _checkpoint_path(directory: Path, r: int) -> Path:
    return directory / f"replicate_{r:05d}.json"


def _load_checkpoint(directory: Path, r: int, key: str) -> dict | None:
    p = _checkpoint_path(directory, r)
    if not p.exists():
        return None
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError:
        log.warning("ignoring unreadable checkpoint %s", p)
        return None
    if data.get("study_key") != key:
        raise ConfigError(f"checkpoint {p} belongs to a different study configuration")
    return data["record"]


def _run_one(args):
    cfg, methods, r, target, eval_mc_n = args
    return run_replicate(cfg, methods, r, target, eval_mc_n)


def mc_study(cfg: SimConfig, methods: Sequence[Method], reps: int, workers: int = 1,
             checkpoint_dir=None, oracle_mc_n: int = 100_000, eval_mc_n: int = 20_000,
             max_failure_rate: float = 0.10) -> McReport:
    """Repeat generate -> fit -> optimize -> estimate -> score over ``reps`` replicates."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if not methods:
        raise ValueError("at least one method is required")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError("method names must be unique")
    methods = list(methods)
    oracle = oracle_rqal(cfg, cfg.optimal_regime, mc_n=oracle_mc_n)
    key = study_key(cfg, methods, eval_mc_n)
    directory = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)

    records: dict[int, dict] = {}
    pending = []
    for r in range(reps):
        rec = _load_checkpoint(directory, r, key) if directory is not None else None
        if rec is None:
            pending.append(r)
        else:
            records[r] = rec
    if records:
        log.info("resumed %d replicates from %s", len(records), directory)

    failures = {n: sum("error" in rec["methods"][n] for rec in records.values()) for n in names}
    limit = max_failure_rate * reps

    def accept(rec):
        records[rec["replicate"]] = rec
        if directory is not None:
            payload = {"study_key": key, "record": rec}
            _checkpoint_path(directory, rec["replicate"]).write_text(json.dumps(payload, default=json_default))
        for n in names:
            if "error" in rec["methods"][n]:
                failures[n] += 1
                if failures[n] > limit:
                    raise StudyAborted(f"{n}: {failures[n]} of {reps} replicates failed; last error: "
                                       f"{rec['methods'][n]['error']}")

    args = [(cfg, methods, r, oracle.value, eval_mc_n) for r in pending]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for rec in pool.map(_run_one, args):
                accept(rec)
    else:
        for a in args:
            accept(_run_one(a))

    ordered = [records[r] for r in range(reps)]
    rows = [aggregate(n, [rec["methods"][n] for rec in ordered]) for n in names]
    meta = {"mr_definition": MR_DEFINITION, "eval_mc_n": eval_mc_n, "oracle_mc_n": oracle_mc_n,
            "study_key": key, "L_U": cfg.lu, "reps": reps}
    return McReport(cfg, methods, oracle.value, oracle.mc_se, rows, ordered, meta)


# ---------------------------------------------------------------------------
# known-regime study comparing propensity tuning


def undersmoothing_config(n: int = 500, seed: int = 0) -> SimConfig:
    """Six-stage design without censoring, observed x = (exp(z1/2), (z1+z2)^2, z3)."""
    return SimConfig(scenario=1, K=6, n=n, seed=seed, kappa=(-0.6, -1.0, -1.0), censoring=False,
                     observed_map="exp_square", L_U=25.0)


TUNING_METHODS = ("Logit", "CV-HAL", "Under-HAL")


def _tuning_replicate(args) -> dict:
    cfg, r, target = args
    panel = generate_panel(cfg, replicate_seed(cfg, r))
    z = float(norm.ppf(0.975))
    out = {"replicate": r}
    seed = _derived_int(cfg.seed, r, 1)
    for name, kind, tuning in (("Logit", "logistic", "undersmooth"), ("CV-HAL", "hal", "cv"),
                               ("Under-HAL", "hal", "undersmooth")):
        try:
            fits = fit_hazards(panel, default_recipe(cfg, kind, tuning), seed=seed)
            est = RqalEvaluator(panel, cumulative_factors(panel, fits), cfg.lu).estimate(cfg.optimal_regime)
            rec = fits.treatment.records.get("pooled", {})
            out[name] = {"estimate": est.value, "se": est.se, "covered": bool(abs(est.value - target) <= z * est.se),
                         "lambda": rec.get("lambda_used"), "lambda_cv": rec.get("lambda_cv"),
                         "lambda_selected": rec.get("lambda_selected")}
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


@dataclass
class TuningRow:
    method: str
    bias: float
    sd: float
    se: float
    cp: float
    lam: float | None
    reps: int
    failures: int


@dataclass
class TuningReport:
    config: SimConfig
    target: float
    rows: list[TuningRow]
    replicates: list[dict] = field(repr=False, default_factory=list)

    def row(self, method: str) -> TuningRow:
        return next(r for r in self.rows if r.method == method)

    def undersmoothed_fraction(self) -> float:
        """Share of replicates whose selected penalty is strictly below the cross-validated one."""
        pairs = [rep["Under-HAL"] for rep in self.replicates if "error" not in rep["Under-HAL"]]
        if not pairs:
            return float("nan")
        return float(np.mean([p["lambda_selected"] < p["lambda_cv"] for p in pairs]))

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "target": self.target, "rows": [asdict(r) for r in self.rows],
                "undersmoothed_fraction": self.undersmoothed_fraction(), "replicates": self.replicates}

    def table(self) -> str:
        lines = [f"{'method':<10} {'bias':>7} {'SD':>7} {'SE':>7} {'CP(%)':>6} {'lambda':>8}"]
        for r in self.rows:
            lam = "NA" if r.lam is None else f"{r.lam:.3f}"
            lines.append(f"{r.method:<10} {r.bias:7.3f} {r.sd:7.3f} {r.se:7.3f} {100 * r.cp:6.0f} {lam:>8}")
        return "\n".join(lines)


def undersmoothing_study(cfg: SimConfig, reps: int, workers: int = 1, oracle_mc_n: int = 100_000,
                         max_failure_rate: float = 0.10) -> TuningReport:
    """RQAL of the known optimal regime with logistic, CV-tuned and undersmoothed HAL propensities."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    target = oracle_rqal(cfg, cfg.optimal_regime, mc_n=oracle_mc_n).value
    args = [(cfg, r, target) for r in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_tuning_replicate, args))
    else:
        out = [_tuning_replicate(a) for a in args]
    rows = []
    for name in TUNING_METHODS:
        ok = [rep[name] for rep in out if "error" not in rep[name]]
        fails = reps - len(ok)
        if fails > max_failure_rate * reps:
            raise StudyAborted(f"{name}: {fails} of {reps} replicates failed")
        est = np.array([o["estimate"] for o in ok])
        lams = [o["lambda"] for o in ok if o["lambda"] is not None]
        rows.append(TuningRow(name, float(est.mean() - target), _sd(est), float(np.mean([o["se"] for o in ok])),
                              float(np.mean([o["covered"] for o in ok])), float(np.mean(lams)) if lams else None,
                              len(ok), fails))
    return TuningReport(cfg, target, rows, out)


# ---------------------------------------------------------------------------
# named presets


PRESETS = {
    "tableS1-logit-ipw-n500": ({"scenario": 1, "K": 6, "n": 500}, [("logistic", IPW)]),
    "tableS1-hal-ipw-n500": ({"scenario": 1, "K": 6, "n": 500}, [("hal", IPW)]),
    "table1-hal-bc-n500": ({"scenario": 2, "K": 6, "n": 500}, [("hal", BC)]),
    "table1-logit-ipw-n500": ({"scenario": 2, "K": 6, "n": 500}, [("logistic", IPW)]),
    "table1-n500": ({"scenario": 2, "K": 6, "n": 500}, [("logistic", IPW), ("hal", IPW), ("logistic", BC),
                                                       ("hal", BC)]),
}


def preset(name: str, seed: int = 0, search: SearchConfig = SearchConfig()) -> tuple[SimConfig, list[Method]]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    fields, arms = PRESETS[name]
    cfg = SimConfig(seed=seed, **fields)
    return cfg, [standard_method(cfg, kind, mode, search) for kind, mode in arms]
