"""Small dense regression solvers used by the group-time estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConvergenceError, SingularDesign


def check_full_rank(X: np.ndarray, what: str = "design") -> None:
    if X.shape[1] == 0:
        return
    if X.shape[0] < X.shape[1]:
        raise SingularDesign(f"{what}: {X.shape[0]} rows for {X.shape[1]} columns")
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] <= s[0] * max(X.shape) * np.finfo(float).eps * 10:
        raise SingularDesign(f"{what}: columns are collinear (condition number {s[0] / max(s[-1], 1e-300):.3g})")


def ols(X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """(Weighted) least-squares coefficients via the normal equations."""
    if w is None:
        A, b = X.T @ X, X.T @ y
    else:
        A, b = (X * w[:, None]).T @ X, (X * w[:, None]).T @ y
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise SingularDesign("outcome regression design is singular") from None


@dataclass(frozen=True)
class LogitFit:
    coef: np.ndarray
    fitted: np.ndarray
    loglik: float
    iterations: int


def _loglik(eta: np.ndarray, d: np.ndarray) -> float:
    return float(np.sum(d * log_expit(eta) + (1 - d) * log_expit(-eta)))


def logit_irls(X: np.ndarray, d: np.ndarray, tol: float = 1e-8, max_iter: int = 100) -> LogitFit:
    """Maximum-likelihood logistic regression by Newton / IRLS.

    Stops when the log-likelihood changes by less than ``tol``; step-halves if
    a Newton step lowers it. Raises :class:`ConvergenceError` after ``max_iter``.
    """
    k = X.shape[1]
    coef = np.zeros(k)
    pbar = np.clip(d.mean(), 1e-6, 1 - 1e-6)
    coef[0] = np.log(pbar / (1 - pbar))
    eta = X @ coef
    ll = _loglik(eta, d)
    for it in range(1, max_iter + 1):
        p = expit(eta)
        W = p * (1 - p)
        H = (X * W[:, None]).T @ X
        grad = X.T @ (d - p)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SingularDesign("propensity design is singular") from None
        lam = 1.0
        for _ in range(30):
            new = coef + lam * step
            eta_new = X @ new
            ll_new = _loglik(eta_new, d)
            if ll_new >= ll - 1e-12:
                break
            lam *= 0.5
        coef, eta = new, eta_new
        if abs(ll_new - ll) < tol:
            return LogitFit(coef, expit(eta), ll_new, it)
        ll = ll_new
    raise ConvergenceError(f"logistic propensity did not converge in {max_iter} iterations")


def logit_tilting(X: np.ndarray, d: np.ndarray, tol: float = 1e-10, max_iter: int = 100) -> LogitFit:
    """Inverse-probability-tilting propensity for the treated.

    Minimises the convex loss ``mean((1-d) exp(X g) - d X g)``; at the optimum
    the comparison units reweighted by ``exp(X g)`` (the fitted odds) match the
    treated covariate means exactly.
    """
    n, k = X.shape
    coef = np.zeros(k)
    coef[0] = np.log(max(d.sum(), 1) / max((1 - d).sum(), 1))

    def loss(c):
        e = X @ c
        with np.errstate(over="ignore", invalid="ignore"):
            val = float(np.mean((1 - d) * np.exp(e) - d * e))
        return val if np.isfinite(val) else np.inf

    cur = loss(coef)
    for it in range(1, max_iter + 1):
        e = np.exp(X @ coef)
        grad = X.T @ ((1 - d) * e - d) / n
        H = (X * ((1 - d) * e)[:, None]).T @ X / n
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SingularDesign("propensity design is singular") from None
        lam = 1.0
        for _ in range(30):
            new = coef - lam * step
            val = loss(new)
            if val <= cur + 1e-15:
                break
            lam *= 0.5
        else:
            # no descent along the Newton direction: the loss is unbounded (no overlap)
            raise ConvergenceError("tilting propensity diverged; treated covariates lie outside comparison support")
        coef = new
        if np.max(np.abs(grad)) < tol or abs(cur - val) < tol * 1e-2:
            cur = val
            return LogitFit(coef, expit(X @ coef), -cur, it)
        cur = val
    raise ConvergenceError(f"tilting propensity did not converge in {max_iter} iterations")
