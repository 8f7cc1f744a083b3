"""Maximum-likelihood logistic regression by iteratively reweighted least squares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit


class SeparationError(ValueError):
    """The likelihood has no finite maximizer."""

    def __init__(self, feature: str):
        super().__init__(f"complete or quasi-complete separation on feature {feature!r}")
        self.feature = feature


class SingularInformation(ValueError):
    """The Fisher information matrix cannot be inverted."""


@dataclass(frozen=True)
class LogisticModel:
    intercept: float
    coef: np.ndarray
    feature_names: tuple[str, ...]
    iterations: int = 0
    converged: bool = True

    def linear(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef

    def to_dict(self) -> dict:
        return {"type": "logistic", "intercept": float(self.intercept),
                "coef": [float(c) for c in self.coef], "feature_names": list(self.feature_names),
                "iterations": self.iterations, "converged": self.converged}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(float(d["intercept"]), np.asarray(d["coef"], dtype=float), tuple(d["feature_names"]),
                   int(d.get("iterations", 0)), bool(d.get("converged", True)))


def _loglik(X1, y, beta):
    eta = X1 @ beta
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def fit_logistic(X: np.ndarray, y: np.ndarray, feature_names=None, tol: float = 1e-8,
                 max_iter: int = 100, max_coef: float = 200.0) -> LogisticModel:
    """Newton-Raphson (IRLS) with step halving.

    Converged when the largest per-row-averaged score is below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, p = X.shape
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{k}" for k in range(p))
    if m == 0 or y.min() == y.max():
        raise ValueError("logistic fit needs at least one row of each response class")
    X1 = np.column_stack([np.ones(m), X])
    ybar = y.mean()
    beta = np.zeros(p + 1)
    beta[0] = np.log(ybar / (1 - ybar))
    ll = _loglik(X1, y, beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = expit(X1 @ beta)
        score = X1.T @ (y - prob) / m
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        w = prob * (1 - prob)
        info = (X1 * w[:, None]).T @ X1 / m
        try:
            if np.linalg.cond(info) > 1e14:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            if np.any(np.abs(beta[1:]) > max_coef / 2):
                raise SeparationError(names[int(np.argmax(np.abs(beta[1:])))]) from None
            raise SingularInformation("singular information matrix in logistic fit") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _loglik(X1, y, cand)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t /= 2
        beta, ll = cand, ll_new
        if p and np.max(np.abs(beta[1:])) > max_coef:
            raise SeparationError(names[int(np.argmax(np.abs(beta[1:])))])
    if not converged:
        prob = expit(X1 @ beta)
        converged = bool(np.max(np.abs(X1.T @ (y - prob) / m)) < tol)
        if not converged and p and np.max(np.abs(beta[1:])) > 20:
            raise SeparationError(names[int(np.argmax(np.abs(beta[1:])))])
    return LogisticModel(float(beta[0]), beta[1:].copy(), names, it, converged)
