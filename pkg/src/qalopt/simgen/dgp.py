"""Simulated landmark studies with a known optimal treatment-length rule.

Covariates evolve multiplicatively from uniform(0.6, 1) baselines, treatment
initiation and censoring follow logistic hazards in (z1, z2), and death
follows a discrete per-unit-time logistic hazard whose treatment benefit
applies only while the subject agrees with the optimal rule.  The quality
score is the third covariate scaled by its maximum over the subject's
lifetime.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from ..panel import INTERCEPT, Landmarks, Panel
from ..regimes import Regime, cumulative_compliance, landmark_scores, regime_design

log = logging.getLogger(__name__)

SCENARIOS = (1, 2)
OBSERVED_MAPS = ("none", "shifted_squares", "exp_square")
DEFAULT_LU = {6: 26.0, 25: 36.0}
DEFAULT_GAP = {6: 10, 25: 4}
REGIME_COVARIATES = (INTERCEPT, "z1", "z2")


class ConfigError(ValueError):
    """Invalid simulation configuration."""


@dataclass(frozen=True)
class SimConfig:
    """Data-generating constants; unset gap and hazard coefficients take the defaults for ``K``.

    ``survival`` holds (intercept, total time slope over the study, z1, z2,
    treatment-while-compliant) coefficients of the death hazard; the time
    slope per unit time is ``survival[1] / L``.
    """

    scenario: int = 1
    K: int = 6
    G: int | None = None
    n: int = 500
    seed: int = 0
    kappa: tuple[float, float, float] | None = None
    nu_c: tuple[float, float, float] | None = None
    survival: tuple[float, float, float, float, float] = (-5.0, 4.5, -0.5, -0.5, -0.5)
    eta_opt: tuple[float, float, float] = (1.0, -1.0, -1.0)
    L_U: float | None = None
    censoring: bool = True
    observed_map: str | None = None
    max_followup_factor: int = 20

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected 1 or 2")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be a positive integer")
        if self.G is None:
            object.__setattr__(self, "G", DEFAULT_GAP.get(int(self.K), 10))
        if int(self.G) != self.G or self.G < 1:
            raise ConfigError("G must be a positive integer (event times use unit steps)")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.observed_map is not None and self.observed_map not in OBSERVED_MAPS:
            raise ConfigError(f"unknown observed_map {self.observed_map!r}; expected one of {OBSERVED_MAPS}")
        for name in ("kappa", "nu_c", "survival", "eta_opt"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(c) for c in v))
        if len(self.survival) != 5:
            raise ConfigError("survival needs 5 coefficients")
        if self.L_U is not None and not self.L_U > 0:
            raise ConfigError("L_U must be positive")

    @property
    def L(self) -> int:
        return int(self.K * self.G)

    @property
    def kappa_values(self) -> tuple[float, float, float]:
        return self.kappa if self.kappa is not None else (0.5 - 0.1 * self.K, -0.5, -0.5)

    @property
    def nu_values(self) -> tuple[float, float, float]:
        if self.nu_c is not None:
            return self.nu_c
        return (-2.0 + 0.5 * self.kappa_values[0], -1.0, -1.0)

    @property
    def observed(self) -> str:
        if self.observed_map is not None:
            return self.observed_map
        return "shifted_squares" if self.scenario == 2 else "none"

    @property
    def lu(self) -> float:
        if self.L_U is not None:
            return float(self.L_U)
        if self.K in DEFAULT_LU:
            return DEFAULT_LU[self.K]
        raise ConfigError(f"no default L_U for K={self.K}; set L_U")

    @property
    def landmarks(self) -> Landmarks:
        return Landmarks.regular(self.K, self.G)

    @property
    def optimal_regime(self) -> Regime:
        return Regime(np.asarray(self.eta_opt), REGIME_COVARIATES)

    @property
    def multiplier_low(self) -> float:
        return 0.4 + 0.02 * self.K

    def replace(self, **changes) -> "SimConfig":
        d = asdict(self)
        d.update(changes)
        return SimConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kappa"] = list(self.kappa_values)
        d["nu_c"] = list(self.nu_values)
        d["observed_map"] = self.observed
        d["L_U"] = self.L_U
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation config fields: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def observed_transform(z: np.ndarray, kind: str) -> np.ndarray:
    """Observed covariates (..., 3) from latent (z1, z2, z3)."""
    z1, z2, z3 = z[..., 0], z[..., 1], z[..., 2]
    if kind == "shifted_squares":
        return np.stack([(z1 + z2 - 1) ** 2, (z1 - 0.5) ** 2, z3], axis=-1)
    if kind == "exp_square":
        return np.stack([np.exp(z1 / 2), (z1 + z2) ** 2, z3], axis=-1)
    raise ValueError(f"no observed transform {kind!r}")


@dataclass
class LatentPaths:
    """Full simulated histories before masking by censoring."""

    z: np.ndarray  # (n, K+1, 3), NaN once dead before the landmark
    a: np.ndarray  # (n, K+1)
    q: np.ndarray  # (n, K+1)
    event_time: np.ndarray
    censor_time: np.ndarray
    compliant: np.ndarray  # agreement with the optimal rule at every landmark attended
    clamped: int = 0
    forced: bool = False
    info: dict = field(default_factory=dict)


def simulate_paths(cfg: SimConfig, n: int, rng: np.random.Generator, forced: Regime | None = None,
                   censoring: bool | None = None) -> LatentPaths:
    """Simulate ``n`` subjects.

    With ``forced`` every treatment decision follows that rule.  Random
    draws are made for all subjects at every step, so the latent streams do
    not depend on who is still alive.
    """
    censoring = cfg.censoring if censoring is None else censoring
    K, G, L = cfg.K, cfg.G, cfg.L
    k0, k1, k2 = cfg.kappa_values
    c0, c1, c2 = cfg.nu_values
    s0, slope, s1, s2, sa = cfg.survival
    per_step = slope / L
    e0, e1, e2 = cfg.optimal_regime.eta
    lo = cfg.multiplier_low
    times = np.arange(K + 1) * G

    z = np.full((n, K + 1, 3), np.nan)
    a = np.full((n, K + 1), np.nan)
    T = np.full(n, np.inf)
    C = np.full(n, np.inf)
    z[:, 0] = rng.uniform(0.6, 1.0, size=(n, 3))
    a[:, 0] = 0.0
    W = np.ones(n, dtype=bool)
    prev = z[:, 0].copy()
    a_prev = np.zeros(n)
    clamped = 0

    def survive(t_from, t_to, zc, ac, Wc):
        for t in range(t_from + 1, t_to + 1):
            u = rng.random(n)
            lin = s0 + t * per_step + s1 * zc[:, 0] + s2 * zc[:, 1] + sa * ac * Wc
            die = np.isinf(T) & (u < expit(lin))
            T[die] = t

    survive(0, G, prev, a_prev, W)
    for j in range(1, K + 1):
        present = T >= times[j]
        u1, u2, u3 = rng.uniform(lo, 1.0, n), rng.uniform(lo, 1.0, n), rng.random(n)
        ua, uc = rng.random(n), rng.random(n)
        z1 = u1 * prev[:, 0]
        z2 = u2 * prev[:, 1]
        g_opt = np.where(a_prev == 1, 1.0, (e0 + e1 * z1 + e2 * z2 >= 0).astype(float))
        if forced is not None:
            cov = np.column_stack([np.ones(n), z1, z2])
            scores = cov @ forced.eta
            aj = np.where(a_prev == 1, 1.0, (scores >= 0).astype(float))
        else:
            aj = np.where(a_prev == 1, 1.0, (ua < expit(k0 + k1 * z1 + k2 * z2)).astype(float))
        W = W & ((aj == g_opt) | ~present)
        pen = np.where(W, 0.0, 0.1)
        low3, high3 = lo - pen, 1.0 - pen
        bad = low3 > high3
        if bad.any():
            clamped += int(np.sum(bad & present))
            low3 = np.minimum(low3, high3)
        z3 = (low3 + u3 * (high3 - low3)) * prev[:, 2]
        zj = np.column_stack([z1, z2, z3])
        z[present, j] = zj[present]
        a[present, j] = aj[present]
        if censoring:
            cens = present & np.isinf(C) & (uc < expit(c0 + c1 * z1 + c2 * z2))
            C[cens] = times[j]
        prev = np.where(present[:, None], zj, prev)
        a_prev = np.where(present, aj, a_prev)
        survive(times[j], times[j] + G if j < K else times[j], prev, a_prev, W)

    t = L
    limit = cfg.max_followup_factor * L
    while np.isinf(T).any() and t < limit:
        u = rng.random(n)
        t += 1
        lin = s0 + t * per_step + s1 * prev[:, 0] + s2 * prev[:, 1] + sa * a_prev * W
        die = np.isinf(T) & (u < expit(lin))
        T[die] = t
    if np.isinf(T).any():
        log.warning("%d subjects still alive at follow-up limit %d; event time set to the limit",
                    int(np.isinf(T).sum()), limit)
        T[np.isinf(T)] = limit
    if clamped:
        log.info("quality multiplier bounds clamped %d times (lower bound above upper)", clamped)

    alive_at = T[:, None] > times[None, :]
    z3 = np.where(alive_at, z[:, :, 2], 0.0)
    q = z3 / np.max(z3, axis=1, keepdims=True)
    q = np.where(T[:, None] >= times[None, :], q, np.nan)
    return LatentPaths(z, a, q, T, C, W, clamped, forced is not None)


def _panel_from_paths(cfg: SimConfig, paths: LatentPaths, seed) -> Panel:
    lm = cfg.landmarks
    T, C = paths.event_time, paths.censor_time
    obs = np.minimum(T, C)[:, None] >= lm.times[None, :]
    z = np.where(obs[:, :, None], paths.z, np.nan)
    names = ["z1", "z2", "z3"]
    if cfg.observed != "none":
        z = np.concatenate([z, observed_transform(z, cfg.observed)], axis=2)
        names += ["x1", "x2", "x3"]
    a = np.where(obs, paths.a, np.nan)
    q = np.where(obs, paths.q, np.nan)
    meta = {"config": cfg.to_dict(), "seed": seed, "quality_clamps": paths.clamped}
    return Panel(lm, np.arange(T.size), z, a, q, T, C, tuple(names), obs.astype(np.int8), meta)


def replicate_seed(cfg: SimConfig, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(cfg.seed), int(replicate)])


def generate_panel(cfg: SimConfig, seed=None) -> Panel:
    """Observed panel for ``cfg.n`` subjects; ``seed`` defaults to ``cfg.seed``."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    paths = simulate_paths(cfg, cfg.n, rng)
    return _panel_from_paths(cfg, paths, seed if isinstance(seed, int) else str(seed))


def dgp_summary(panel: Panel) -> dict:
    """Censoring, initiation and exact-compliance fractions of a simulated panel.

    Compliance means agreeing with the optimal rule at every observed
    landmark and remaining uncensored.
    """
    cfg = SimConfig.from_dict(panel.meta["config"])
    reg = cfg.optimal_regime
    scores = landmark_scores(regime_design(panel, reg.covariates), reg.eta)
    cc = cumulative_compliance(scores, panel.a)
    last = panel.y.sum(1).astype(int) - 1
    follows = cc[np.arange(panel.n), last] == 1
    observed = panel.event_observed == 1
    return {
        "censored": float(np.mean(~observed)),
        "initiated": float(np.mean(np.nansum(panel.a, axis=1) > 0)),
        "compliant": float(np.mean(follows & observed)),
        "mean_observed_time": float(np.mean(panel.observed_time)),
    }


# ---------------------------------------------------------------------------
# oracle quantities


def latent_qal(cfg: SimConfig, paths: LatentPaths) -> np.ndarray:
    times = np.arange(cfg.K + 1) * cfg.G
    ends = np.append(times[1:], np.inf)
    seg = np.clip(np.minimum(paths.event_time[:, None], ends[None, :]) - times[None, :], 0.0, None)
    return np.where(seg > 0, np.nan_to_num(paths.q) * seg, 0.0).sum(1)


@dataclass(frozen=True)
class OracleValue:
    value: float
    mc_se: float
    mc_n: int


def oracle_rqal(cfg: SimConfig, eta, mc_n: int = 100_000, seed: int = 20240101, L_U: float | None = None,
                chunk: int = 50_000) -> OracleValue:
    """Monte Carlo RQAL when everyone follows ``eta`` and nobody is censored."""
    regime = eta if isinstance(eta, Regime) else Regime(np.asarray(eta, dtype=float), REGIME_COVARIATES)
    L_U = cfg.lu if L_U is None else L_U
    rng = np.random.default_rng(seed)
    vals = []
    left = mc_n
    while left > 0:
        m = min(chunk, left)
        paths = simulate_paths(cfg, m, rng, forced=regime, censoring=False)
        vals.append(np.minimum(latent_qal(cfg, paths), L_U))
        left -= m
    v = np.concatenate(vals)
    return OracleValue(float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)), int(v.size))


def misclassification_rate(cfg: SimConfig, eta_hat, mc_n: int = 100_000, seed: int = 20240102) -> float:
    """Percent of at-risk landmark decisions where ``eta_hat`` disagrees with the optimal rule.

    Decisions are compared along histories that follow the optimal rule,
    without censoring, at landmarks 1..K.
    """
    regime = eta_hat if isinstance(eta_hat, Regime) else Regime(np.asarray(eta_hat, dtype=float),
                                                                 REGIME_COVARIATES)
    opt = cfg.optimal_regime
    rng = np.random.default_rng(seed)
    paths = simulate_paths(cfg, mc_n, rng, forced=opt, censoring=False)
    prev = np.zeros_like(paths.a)
    prev[:, 1:] = paths.a[:, :-1]
    cov = np.concatenate([np.ones(paths.z.shape[:2] + (1,)), paths.z[:, :, :2]], axis=2)
    at_risk = ~np.isnan(paths.a)
    at_risk[:, 0] = False
    g_hat = np.where(prev == 1, 1.0, (cov @ regime.eta >= 0).astype(float))
    g_opt = np.where(prev == 1, 1.0, (cov @ opt.eta >= 0).astype(float))
    disagree = (g_hat != g_opt) & at_risk
    return float(100.0 * disagree.sum() / at_risk.sum())


@dataclass(frozen=True)
class TruthHazards:
    """Known treatment and censoring hazards of a simulation config, read from z1 and z2."""

    kappa: tuple[float, float, float]
    nu_c: tuple[float, float, float]
    censoring: bool = True

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "TruthHazards":
        return cls(cfg.kappa_values, cfg.nu_values, cfg.censoring)

    def __call__(self, role: str, panel: Panel, subject: np.ndarray, stage: np.ndarray) -> np.ndarray:
        z1 = panel.covariate("z1")[subject, stage]
        z2 = panel.covariate("z2")[subject, stage]
        if role == "treatment":
            b = self.kappa
        else:
            if not self.censoring:
                return np.zeros(subject.size)
            b = self.nu_c
        return expit(b[0] + b[1] * z1 + b[2] * z2)
