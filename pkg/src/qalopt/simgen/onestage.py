"""Single-decision study with a Gaussian outcome: IPW mean of Y under treatment.

Latent Z1, Z2 ~ N(0, 0.5^2); P(A = 1 | Z) = expit(b1 Z1 + b2 Z2);
Y = a1 Z1 + a2 Z2 + e with e ~ N(0, 0.5^2), so E[Y(1)] = 0.  Analysts see
only X1 = exp(Z1 / 2) and X2 = (Z1 + Z2)^2, which makes a main-terms
logistic propensity model misspecified.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from ..hazards import hal
from ..hazards.logistic import fit_logistic

log = logging.getLogger(__name__)

EPS = 1e-3
ONE_STAGE_METHODS = ("Logit", "CV-HAL", "Under-HAL", "Truth")


@dataclass(frozen=True)
class OneStageConfig:
    n: int = 500
    seed: int = 0
    alpha: tuple[float, float] = (1.0, 1.0)
    beta: tuple[float, float] = (-1.5, 1.5)
    z_sd: float = 0.5
    noise_sd: float = 0.5
    max_depth: int = 2
    max_knots_per_section: int = 50
    cv_folds: int = 5

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("the one-stage study needs n >= 100")


@dataclass
class OneStageData:
    z: np.ndarray
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    propensity: np.ndarray


def generate_one_stage(cfg: OneStageConfig, seed) -> OneStageData:
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, cfg.z_sd, (cfg.n, 2))
    eps = rng.normal(0.0, cfg.noise_sd, cfg.n)
    prop = expit(cfg.beta[0] * z[:, 0] + cfg.beta[1] * z[:, 1])
    a = (rng.random(cfg.n) < prop).astype(float)
    y = cfg.alpha[0] * z[:, 0] + cfg.alpha[1] * z[:, 1] + eps
    x = np.column_stack([np.exp(z[:, 0] / 2), (z[:, 0] + z[:, 1]) ** 2])
    return OneStageData(z, x, a, y, prop)


def hajek(a: np.ndarray, y: np.ndarray, pi: np.ndarray) -> tuple[float, np.ndarray]:
    """Normalized IPW mean of Y among the treated, and its fixed-propensity influence values."""
    w = a / pi
    m = w.mean()
    psi = float(np.sum(w * y) / np.sum(w))
    return psi, w * (y - psi) / m


def logistic_sandwich_ic(x: np.ndarray, a: np.ndarray, y: np.ndarray, pi: np.ndarray, psi: float,
                         base_ic: np.ndarray) -> np.ndarray:
    """Influence values accounting for the estimated logistic propensity (stacked equations)."""
    X1 = np.column_stack([np.ones(a.size), x])
    m = np.mean(a / pi)
    D = np.mean((-a * (1 - pi) / pi * (y - psi))[:, None] * X1, axis=0)
    info = (X1 * (pi * (1 - pi))[:, None]).T @ X1 / a.size
    correction = (X1 * (a - pi)[:, None]) @ np.linalg.solve(info, D)
    return base_ic + correction / m


def _one_replicate(cfg: OneStageConfig, r: int) -> dict:
    data = generate_one_stage(cfg, np.random.SeedSequence([cfg.seed, r]))
    out = {}
    z = float(norm.ppf(0.975))

    def record(name, pi, ic_fn=None, lam=None):
        pi = np.clip(pi, EPS, 1 - EPS)
        psi, ic = hajek(data.a, data.y, pi)
        if ic_fn is not None:
            ic = ic_fn(pi, psi, ic)
        se = float(np.sqrt(np.mean(ic ** 2) / ic.size))
        out[name] = {"estimate": psi, "se": se, "covered": bool(abs(psi) <= z * se), "lambda": lam}

    try:
        model = fit_logistic(data.x, data.a)
        record("Logit", expit(model.linear(data.x)),
               lambda pi, psi, ic: logistic_sandwich_ic(data.x, data.a, data.y, pi, psi, ic))
    except ValueError as exc:
        out["Logit"] = {"error": str(exc)}
    try:
        path = hal.fit_hal_path(data.x, data.a, seed=int(np.random.SeedSequence([cfg.seed, r, 1])
                                                        .generate_state(1)[0]),
                                cv_folds=cfg.cv_folds, max_depth=cfg.max_depth,
                                max_knots_per_section=cfg.max_knots_per_section)
        hal.select_undersmoothed(path, role="treatment")
        for name, lam in (("CV-HAL", path.lambda_cv), ("Under-HAL", path.lambda_selected)):
            m = path.model(lam)
            record(name, expit(m.linear(data.x)), lam=float(m.lam))
    except (ValueError, FloatingPointError) as exc:
        out["CV-HAL"] = out["Under-HAL"] = {"error": str(exc)}
    record("Truth", data.propensity)
    return out


@dataclass
class OneStageRow:
    method: str
    bias: float
    sd: float
    se: float
    cp: float
    lam: float | None
    reps: int
    failures: int


@dataclass
class OneStageReport:
    config: OneStageConfig
    rows: list[OneStageRow]
    replicates: list[dict] = field(repr=False, default_factory=list)

    def row(self, method: str) -> OneStageRow:
        return next(r for r in self.rows if r.method == method)

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "rows": [asdict(r) for r in self.rows],
                "replicates": self.replicates}

    def table(self) -> str:
        lines = [f"{'method':<10} {'bias':>7} {'SD':>7} {'SE':>7} {'CP(%)':>6} {'lambda':>8}"]
        for r in self.rows:
            lam = "NA" if r.lam is None else f"{r.lam:.3f}"
            lines.append(f"{r.method:<10} {r.bias:7.3f} {r.sd:7.3f} {r.se:7.3f} {100 * r.cp:6.0f} {lam:>8}")
        return "\n".join(lines)


def one_stage_study(cfg: OneStageConfig, reps: int, workers: int = 1,
                    max_failure_rate: float = 0.10) -> OneStageReport:
    """Bias, empirical SD, mean SE, coverage of 0 and mean penalty for each propensity method."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reps_out = list(pool.map(_one_replicate, [cfg] * reps, range(reps)))
    else:
        reps_out = [_one_replicate(cfg, r) for r in range(reps)]
    rows = []
    for method in ONE_STAGE_METHODS:
        ok = [rep[method] for rep in reps_out if "error" not in rep[method]]
        failures = reps - len(ok)
        if failures > max_failure_rate * reps:
            raise RuntimeError(f"{method}: {failures} of {reps} replicates failed")
        est = np.array([o["estimate"] for o in ok])
        lams = [o["lambda"] for o in ok if o["lambda"] is not None]
        rows.append(OneStageRow(method, float(est.mean()), float(est.std(ddof=1)) if est.size > 1 else 0.0,
                                float(np.mean([o["se"] for o in ok])), float(np.mean([o["covered"] for o in ok])),
                                float(np.mean(lams)) if lams else None, len(ok), failures))
    return OneStageReport(cfg, rows, reps_out)
