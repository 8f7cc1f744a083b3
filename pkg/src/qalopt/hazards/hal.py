"""Highly adaptive lasso for binary hazards.

The working model is a logistic regression on zero-order indicator basis
functions ``phi(u) = I(u_s >= knot_s)`` over every feature section ``s`` up
to a maximum interaction depth.  Coefficients are fitted with an L1 penalty
(intercept unpenalized) along a descending penalty grid by proximal Newton
iterations with warm starts.

Tuning offers the cross-validated penalty, the score-based undersmoothing
criterion, and the floor that keeps the number of active basis functions
below the square root of the sample size.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

EPS = 1e-3


# ---------------------------------------------------------------------------
# basis


@dataclass(frozen=True)
class HalBasis:
    """Indicator basis grouped by section.

    ``knots[s]`` has shape (m_s, len(sections[s])); each row is one basis
    function.
    """

    sections: tuple[tuple[int, ...], ...]
    knots: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        return int(sum(k.shape[0] for k in self.knots))

    def __len__(self) -> int:
        return self.size

    def entries(self) -> list[tuple[tuple[int, ...], np.ndarray]]:
        return [(s, row) for s, kn in zip(self.sections, self.knots) for row in kn]

    def design(self, X: np.ndarray) -> np.ndarray:
        """Basis matrix (rows, size) of 0/1 floats."""
        X = np.asarray(X, dtype=float)
        blocks = []
        for s, kn in zip(self.sections, self.knots):
            if kn.shape[0] == 0:
                continue
            sub = X[:, list(s)]
            blocks.append(np.all(sub[:, None, :] >= kn[None, :, :], axis=2))
        if not blocks:
            return np.empty((X.shape[0], 0))
        return np.concatenate(blocks, axis=1).astype(float)

    def subset(self, keep: np.ndarray) -> "HalBasis":
        keep = np.asarray(keep, dtype=bool)
        secs, kns, start = [], [], 0
        for s, kn in zip(self.sections, self.knots):
            k = keep[start:start + kn.shape[0]]
            start += kn.shape[0]
            if k.any():
                secs.append(s)
                kns.append(kn[k])
        return HalBasis(tuple(secs), tuple(kns))

    def to_dict(self) -> dict:
        return {"sections": [list(s) for s in self.sections],
                "knots": [kn.tolist() for kn in self.knots]}

    @classmethod
    def from_dict(cls, d: dict) -> "HalBasis":
        secs = tuple(tuple(int(i) for i in s) for s in d["sections"])
        kns = tuple(np.asarray(k, dtype=float).reshape(-1, len(s)) for s, k in zip(secs, d["knots"]))
        return cls(secs, kns)


def _thin(points: np.ndarray, max_knots: int) -> np.ndarray:
    """Keep evenly spaced order statistics (lexicographic order for |s| > 1)."""
    m = points.shape[0]
    if m <= max_knots:
        return points
    idx = np.unique(np.round(np.linspace(0, m - 1, max_knots)).astype(int))
    return points[idx]


def enumerate_basis(X: np.ndarray, max_depth: int = 2, max_knots_per_section: int = 50) -> HalBasis:
    """Full indicator catalog for every section of size <= ``max_depth``."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    sections, knots = [], []
    for depth in range(1, min(max_depth, d) + 1):
        for s in itertools.combinations(range(d), depth):
            pts = np.unique(X[:, list(s)], axis=0)
            sections.append(s)
            knots.append(_thin(pts, max_knots_per_section))
    return HalBasis(tuple(sections), tuple(knots))


def informative_columns(Phi: np.ndarray) -> np.ndarray:
    """Mask dropping constant columns (merged into the intercept) and duplicates."""
    if Phi.shape[1] == 0:
        return np.zeros(0, dtype=bool)
    nonconst = Phi.min(0) != Phi.max(0)
    keep = np.zeros(Phi.shape[1], dtype=bool)
    packed = np.packbits(Phi.astype(bool), axis=0)
    seen = set()
    for k in np.nonzero(nonconst)[0]:
        key = packed[:, k].tobytes()
        if key not in seen:
            seen.add(key)
            keep[k] = True
    return keep


# ---------------------------------------------------------------------------
# solver


@njit(cache=True)
def _cd_gram(G, c, beta, penalized, lam, delta, tol, max_sweeps):
    """Coordinate descent on ``0.5 d'Gd - c'd + lam * |beta + d|_1`` (penalized entries only).

    ``delta`` is the starting point and is updated in place.
    """
    q = c.size
    grad = c - G @ delta
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        maxd = 0.0
        for k in range(q):
            h = G[k, k]
            if h <= 0.0:
                continue
            b = beta[k] + delta[k]
            z = b + grad[k] / h
            if penalized[k]:
                thr = lam / h
                if z > thr:
                    nb = z - thr
                elif z < -thr:
                    nb = z + thr
                else:
                    nb = 0.0
            else:
                nb = z
            d = nb - b
            if d != 0.0:
                delta[k] += d
                for l in range(q):
                    grad[l] -= G[l, k] * d
                if abs(d) > maxd:
                    maxd = abs(d)
        if maxd < tol:
            break
    return sweeps


def _sign_fixed_polish(G, c, cur, delta, lam, tol):
    """Exact minimizer of the quadratic subproblem for the sign pattern of ``cur + delta``.

    Returns None unless the solution keeps its signs and satisfies the
    subgradient conditions of the inactive coordinates.
    """
    new = cur + delta
    active = new != 0
    active[0] = True
    sign = np.sign(new)
    sign[0] = 0.0
    A = np.nonzero(active)[0]
    rhs = c[A] + G[np.ix_(A, A)] @ cur[A] - lam * sign[A]
    try:
        sol = np.linalg.solve(G[np.ix_(A, A)], rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)) or np.any(np.sign(sol[1:]) != sign[A[1:]]):
        return None
    d = -cur.copy()
    d[A] = sol - cur[A]
    inactive = ~active
    if inactive.any() and np.max(np.abs(c[inactive] - G[inactive] @ d)) > lam + tol:
        return None
    return d


def _objective(y, eta, beta, lam):
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + lam * np.abs(beta).sum())


def _expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _kkt_gap(grad, g0, beta, lam):
    gap = abs(g0)
    active = beta != 0
    if active.any():
        gap = max(gap, float(np.max(np.abs(grad[active] - lam * np.sign(beta[active])))))
    if (~active).any():
        gap = max(gap, float(np.max(np.abs(grad[~active]))) - lam)
    return gap


def lambda_max(Phi: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty at which every basis coefficient is zero."""
    if Phi.shape[1] == 0:
        return 1.0
    g = np.abs(Phi.T @ (y - y.mean())) / y.size
    return float(max(g.max(), 1e-12))


def lambda_grid(lmax: float, n_lambda: int = 50, min_ratio: float = 1e-4) -> np.ndarray:
    return lmax * np.logspace(0.0, np.log10(min_ratio), n_lambda)


class PathSolver:
    """Warm-started L1-penalized logistic solver stepping down a penalty grid.

    Each penalty is solved by proximal Newton iterations: a weighted
    quadratic model of the log-loss is minimized by cyclic coordinate
    descent over a working set (using its weighted Gram matrix), the step
    is backtracked on the exact objective, and iterations stop once the
    subgradient optimality gap over all columns is below ``kkt_tol``.
    """

    def __init__(self, Phi: np.ndarray, y: np.ndarray, tol: float = 1e-7, kkt_tol: float = 5e-7,
                 max_outer: int = 100, max_sweeps: int = 100000):
        y = np.asarray(y, dtype=float)
        if y.size == 0 or y.min() == y.max():
            raise ValueError("HAL fit needs both response classes (all-zero or all-one responses)")
        self.Phi = np.ascontiguousarray(Phi, dtype=float)
        self.y = y
        self.m, self.p = self.Phi.shape
        ybar = y.mean()
        self.b0 = float(np.log(ybar / (1 - ybar)))
        self.beta = np.zeros(self.p)
        self.working = np.zeros(self.p, dtype=bool)
        self.prev_lam = None
        self.tol, self.kkt_tol, self.max_outer, self.max_sweeps = tol, kkt_tol, max_outer, max_sweeps

    def _gradient(self, eta):
        resid = self.y - _expit(eta)
        return self.Phi.T @ resid / self.m, float(resid.mean())

    def step(self, lam: float) -> tuple[float, np.ndarray, int, float]:
        prev = lam if self.prev_lam is None else self.prev_lam
        if lam > prev:
            raise ValueError("penalty grid must be strictly decreasing")
        y, Phi, m = self.y, self.Phi, self.m
        b0, beta = self.b0, self.beta
        eta = b0 + Phi @ beta
        grad, g0 = self._gradient(eta)
        self.working |= (beta != 0) | (np.abs(grad) >= 2.0 * lam - prev)
        gap = _kkt_gap(grad, g0, beta, lam)
        f_old = _objective(y, eta, beta, lam)
        sweeps = 0
        inner_tol = self.tol
        for _ in range(self.max_outer):
            if gap <= self.kkt_tol:
                break
            prob = _expit(eta)
            w = np.maximum(prob * (1 - prob), 1e-10)
            r = (y - prob) / w
            idx = np.nonzero(self.working)[0]
            XW = np.empty((m, idx.size + 1))
            XW[:, 0] = 1.0
            XW[:, 1:] = Phi[:, idx]
            Xw = XW * w[:, None]
            G = Xw.T @ XW / m
            c = Xw.T @ r / m
            cur = np.concatenate([[b0], beta[idx]])
            pen = np.ones(idx.size + 1, dtype=np.bool_)
            pen[0] = False
            delta = np.zeros(idx.size + 1)
            sw = _cd_gram(G, c, cur, pen, float(lam), delta, max(inner_tol, 1e-5), self.max_sweeps)
            sweeps += sw
            polished = _sign_fixed_polish(G, c, cur, delta, float(lam), 1e-12)
            if polished is not None:
                delta = polished
            elif inner_tol < 1e-5:
                sweeps += _cd_gram(G, c, cur, pen, float(lam), delta, inner_tol, self.max_sweeps)
            d_eta = XW @ delta
            t = 1.0
            improved = False
            for _ in range(50):
                cand = beta.copy()
                cand[idx] += t * delta[1:]
                cand_eta = eta + t * d_eta
                f_new = _objective(y, cand_eta, cand, lam)
                if f_new <= f_old + 1e-14 * abs(f_old):
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
            if t == 1.0:
                # exact zeros from the soft threshold survive only with full steps
                cand[idx[(cur[1:] + delta[1:]) == 0]] = 0.0
                cand_eta = b0 + delta[0] + Phi @ cand
                f_new = _objective(y, cand_eta, cand, lam)
            b0 = b0 + t * delta[0]
            beta = cand
            eta = cand_eta
            f_old = f_new
            grad, g0 = self._gradient(eta)
            gap = _kkt_gap(grad, g0, beta, lam)
            self.working |= np.abs(grad) > lam
            inner_tol = max(inner_tol * 0.1, 1e-13)
        if not (np.isfinite(b0) and np.all(np.isfinite(beta))):
            raise FloatingPointError("non-finite loss in HAL path")
        if gap > self.kkt_tol:
            log.debug("HAL solver stopped with optimality gap %.3g at lambda %.4g", gap, lam)
        self.b0, self.beta, self.prev_lam = b0, beta, lam
        return b0, beta.copy(), sweeps, gap


@dataclass
class PathFit:
    lambdas: np.ndarray
    intercepts: np.ndarray
    coefs: np.ndarray
    sweeps: np.ndarray
    kkt_gap: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return (self.coefs != 0).sum(1)

    def linear(self, Phi: np.ndarray) -> np.ndarray:
        """Linear predictors for every penalty, shape (rows, n_lambda)."""
        return Phi @ self.coefs.T + self.intercepts[None, :]


def solve_path(Phi: np.ndarray, y: np.ndarray, lambdas: np.ndarray, **solver_options) -> PathFit:
    """L1-penalized logistic fit at every penalty of a descending grid."""
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size > 1 and np.any(np.diff(lambdas) >= 0):
        raise ValueError("penalty grid must be strictly decreasing")
    solver = PathSolver(Phi, y, **solver_options)
    out = [solver.step(lam) for lam in lambdas]
    return PathFit(lambdas, np.array([o[0] for o in out]), np.array([o[1] for o in out]).reshape(len(out), -1),
                   np.array([o[2] for o in out]), np.array([o[3] for o in out]))


def kkt_violation(Phi: np.ndarray, y: np.ndarray, intercept: float, coef: np.ndarray, lam: float) -> float:
    """Largest violation of the subgradient optimality conditions."""
    prob = 1.0 / (1.0 + np.exp(-(intercept + Phi @ coef)))
    grad = Phi.T @ (y - prob) / y.size
    v0 = abs(float(np.mean(y - prob)))
    active = coef != 0
    v_act = np.abs(grad[active] - lam * np.sign(coef[active]))
    v_in = np.clip(np.abs(grad[~active]) - lam, 0, None)
    return float(max(v0, v_act.max(initial=0.0), v_in.max(initial=0.0)))


# ---------------------------------------------------------------------------
# models and tuning


def _neg_loglik(y, eta):
    return np.logaddexp(0.0, eta) - y * eta


@dataclass(frozen=True)
class HalModel:
    basis: HalBasis
    intercept: float
    coef: np.ndarray
    lam: float
    feature_names: tuple[str, ...] = ()

    @property
    def l1_norm(self) -> float:
        return float(abs(self.intercept) + np.abs(self.coef).sum())

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.coef))

    def linear(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + self.basis.design(X) @ self.coef

    def compact(self) -> "HalModel":
        """Same predictor keeping only basis functions with nonzero coefficients."""
        keep = self.coef != 0
        return HalModel(self.basis.subset(keep), self.intercept, self.coef[keep], self.lam, self.feature_names)

    def to_dict(self) -> dict:
        return {"type": "hal", "basis": self.basis.to_dict(), "intercept": float(self.intercept),
                "coef": [float(c) for c in self.coef], "lambda": float(self.lam),
                "feature_names": list(self.feature_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "HalModel":
        return cls(HalBasis.from_dict(d["basis"]), float(d["intercept"]),
                   np.asarray(d["coef"], dtype=float), float(d["lambda"]), tuple(d.get("feature_names", ())))


@dataclass
class FoldFit:
    train: np.ndarray
    valid: np.ndarray
    path: PathFit
    valid_linear: np.ndarray


@dataclass
class HalPath:
    """Full-data path plus cross-validation fold fits and tuning records."""

    basis: HalBasis
    lambdas: np.ndarray
    full: PathFit
    folds: list[FoldFit]
    cv_loss: np.ndarray
    y: np.ndarray
    Phi: np.ndarray = field(repr=False)
    lambda_cv: float = np.nan
    lambda_tilde: float = np.nan
    lambda_floor: float = np.nan
    lambda_selected: float = np.nan
    criterion: np.ndarray | None = None
    grid: np.ndarray | None = None
    floor_n: int | None = None

    @property
    def active(self) -> np.ndarray:
        return self.full.active

    @property
    def n(self) -> int:
        return self.y.size

    def index(self, lam: float) -> int:
        return int(np.argmin(np.abs(self.lambdas - lam)))

    def model(self, lam: float, feature_names=()) -> HalModel:
        i = self.index(lam)
        return HalModel(self.basis, float(self.full.intercepts[i]), self.full.coefs[i].copy(),
                        float(self.lambdas[i]), tuple(feature_names))


def fold_assignment(groups: np.ndarray, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold label per row; rows sharing a group label stay together."""
    uniq, inv = np.unique(groups, return_inverse=True)
    labels = rng.permutation(uniq.size) % n_folds
    return labels[inv]


def fit_hal_path(X: np.ndarray, y: np.ndarray, basis: HalBasis | None = None, lambdas=None,
                 cv_folds: int = 5, groups=None, seed=0, n_lambda: int = 50,
                 lambda_min_ratio: float = 1e-4, max_depth: int = 2, max_knots_per_section: int = 50,
                 fold_labels=None, early_stop: bool = True, patience: int = 5, floor_n: int | None = None,
                 **solver_options) -> HalPath:
    """Fit the penalty path on all rows and on each training fold, in lockstep.

    With ``early_stop`` the descent stops once the full-data fit has at
    least sqrt(n) active basis functions and the cross-validated loss has
    not improved for ``patience`` grid points; the remaining, more complex
    fits can no longer be selected by either tuning rule.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if cv_folds < 2:
        raise ValueError("cv_folds must be >= 2")
    if y.size == 0 or y.max() == 0:
        raise ValueError("HAL fit needs both response classes (all-zero responses)")
    if y.min() == 1:
        raise ValueError("HAL fit needs both response classes (all-one responses)")
    if basis is None:
        basis = enumerate_basis(X, max_depth, max_knots_per_section)
    Phi_all = basis.design(X)
    keep = informative_columns(Phi_all)
    basis = basis.subset(keep)
    Phi = Phi_all[:, keep]
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(Phi, y), n_lambda, lambda_min_ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size > 1 and np.any(np.diff(lambdas) >= 0):
        raise ValueError("penalty grid must be strictly decreasing")
    n_floor = y.size if floor_n is None else floor_n

    if fold_labels is None:
        rng = np.random.default_rng(seed)
        groups = np.arange(y.size) if groups is None else np.asarray(groups)
        fold_labels = fold_assignment(groups, cv_folds, rng)
    fold_labels = np.asarray(fold_labels)
    fold_rows = []
    for b in range(cv_folds):
        valid = np.nonzero(fold_labels == b)[0]
        train = np.nonzero(fold_labels != b)[0]
        if valid.size == 0:
            continue
        if y[train].min() == y[train].max():
            raise ValueError(f"fold {b}: training rows have a single response class")
        fold_rows.append((train, valid))

    full_solver = PathSolver(Phi, y, **solver_options)
    fold_solvers = [PathSolver(Phi[tr], y[tr], **solver_options) for tr, _ in fold_rows]
    full_out, fold_out, cv_loss = [], [[] for _ in fold_rows], []
    best, best_i = np.inf, 0
    for i, lam in enumerate(lambdas):
        full_out.append(full_solver.step(lam))
        loss = 0.0
        for b, (solver, (_, va)) in enumerate(zip(fold_solvers, fold_rows)):
            res = solver.step(lam)
            fold_out[b].append(res)
            lin = res[0] + Phi[va] @ res[1]
            loss += float(_neg_loglik(y[va], lin).sum())
        loss /= y.size
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite cross-validated loss")
        cv_loss.append(loss)
        if loss < best:
            best, best_i = loss, i
        J = int(np.count_nonzero(full_out[-1][1]))
        if early_stop and J >= math.sqrt(n_floor) and i - best_i >= patience:
            break

    def pack(out):
        k = len(out)
        return PathFit(lambdas[:k], np.array([o[0] for o in out]),
                       np.array([o[1] for o in out]).reshape(k, -1),
                       np.array([o[2] for o in out]), np.array([o[3] for o in out]))

    used = lambdas[:len(full_out)]
    folds = []
    for (tr, va), out in zip(fold_rows, fold_out):
        fp = pack(out)
        folds.append(FoldFit(tr, va, fp, fp.linear(Phi[va])))
    path = HalPath(basis, used, pack(full_out), folds, np.asarray(cv_loss), y, Phi,
                   grid=lambdas, floor_n=n_floor)
    path.lambda_cv = float(used[int(np.argmin(path.cv_loss))])
    return path


def undersmooth_score(path: HalPath, role: str = "treatment", divisor: str = "observed") -> float:
    """Penalty minimizing the fold-averaged, L1-normalized basis score sum.

    For each fold the summed basis functions are those active in the fold
    fit at the cross-validated penalty.  The score of basis ``phi`` is the
    validation mean of ``phi * (Y - h) / h`` where, for the censoring role,
    ``Y`` and ``h`` refer to remaining uncensored (``divisor="observed"``)
    or to the censoring event itself (``divisor="hazard"``).
    """
    L = path.lambdas.size
    icv = path.index(path.lambda_cv)
    crit = np.zeros(L)
    valid_lambda = np.ones(L, dtype=bool)
    for fold in path.folds:
        yv = path.y[fold.valid]
        Phi_v = path.Phi[fold.valid]
        h = 1.0 / (1.0 + np.exp(-fold.valid_linear))
        h = np.clip(h, EPS, 1 - EPS)
        if role == "censoring" and divisor == "observed":
            resid = ((1 - yv)[:, None] - (1 - h)) / (1 - h)
        else:
            resid = (yv[:, None] - h) / h
        scores = np.abs(Phi_v.T @ resid) / yv.size  # (p, L)
        J = fold.path.coefs[icv] != 0
        norms = np.abs(fold.path.intercepts) + np.abs(fold.path.coefs).sum(1)
        valid_lambda &= norms > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            crit += scores[J].sum(0) / norms
    crit /= max(len(path.folds), 1)
    crit[~valid_lambda] = np.inf
    path.criterion = crit
    if not np.any(np.isfinite(crit)):
        path.lambda_tilde = float(path.lambdas[0])
    else:
        path.lambda_tilde = float(path.lambdas[int(np.argmin(crit))])
    return path.lambda_tilde


def lambda_floor(lambdas: np.ndarray, active: np.ndarray, n: int) -> float:
    """Smallest grid penalty whose active count stays below sqrt(n)."""
    lambdas = np.asarray(lambdas, dtype=float)
    ok = np.asarray(active) < math.sqrt(n)
    if not ok.any():
        log.warning("no penalty keeps the active set below sqrt(n); using the largest")
        return float(lambdas.max())
    return float(lambdas[ok].min())


def select_undersmoothed(path: HalPath, n: int | None = None, role: str = "treatment",
                         divisor: str = "observed") -> float:
    """``max(lambda_floor, lambda_tilde)``; the full-data path holds the refit."""
    n = (path.floor_n or path.n) if n is None else n
    if np.isnan(path.lambda_tilde):
        undersmooth_score(path, role, divisor)
    path.lambda_floor = lambda_floor(path.lambdas, path.active, n)
    path.lambda_selected = max(path.lambda_floor, path.lambda_tilde)
    return path.lambda_selected


def score_diagnostic(model: HalModel, X: np.ndarray, y: np.ndarray) -> dict:
    """Smallest absolute empirical basis score among active basis functions.

    Advisory only: compares against ``sd / (sqrt(n) log n)`` of that score.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    Phi = model.basis.design(X)
    prob = 1.0 / (1.0 + np.exp(-(model.intercept + Phi @ model.coef)))
    contrib = Phi * (y - prob)[:, None]
    scores = np.abs(contrib.mean(0))
    active = np.nonzero(model.coef != 0)[0]
    if active.size == 0:
        return {"min_score": float("nan"), "basis_index": None, "threshold": float("nan"),
                "satisfied": False, "active": 0, "scores": scores.tolist()}
    k = active[int(np.argmin(scores[active]))]
    sd = float(np.std(contrib[:, k], ddof=1)) if n > 1 else 0.0
    thr = sd / (math.sqrt(n) * math.log(n)) if n > 1 else float("nan")
    return {"min_score": float(scores[k]), "basis_index": int(k), "threshold": thr,
            "satisfied": bool(scores[k] <= thr), "active": int(active.size), "scores": scores.tolist()}
