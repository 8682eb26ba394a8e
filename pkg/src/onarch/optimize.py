"""Damped Newton ascent with backtracking line search.

Parameters with only a lower bound are optimized through
``u = log(theta - lower)``, parameters with both bounds through the logit
``u = log((theta - lower) / (upper - theta))``; the others stay linear. When the Hessian in the working coordinates is not
negative-definite, it is shifted (Levenberg-style) before solving for the
step. Steps are accepted only under the Armijo sufficient-increase
condition, so the objective never decreases across accepted iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

_MIN_GAP = 1e-10


@dataclass
class OptimResult:
    theta: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    converged: bool
    iterations: int
    history: list[float] = field(default_factory=list)
    message: str = ""

    @property
    def gradient_norm(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


class _Transform:
    def __init__(self, lower: np.ndarray, upper: np.ndarray | None = None):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.full_like(self.lower, np.inf) if upper is None else np.asarray(upper, dtype=float)
        if np.any(self.upper <= self.lower):
            raise ValueError("upper bounds must exceed lower bounds")
        self.logit = np.isfinite(self.lower) & np.isfinite(self.upper)
        self.log = np.isfinite(self.lower) & ~self.logit
        if np.any(np.isfinite(self.upper) & ~np.isfinite(self.lower)):
            raise ValueError("an upper bound needs a finite lower bound")

    def to_u(self, theta: np.ndarray) -> np.ndarray:
        u = np.array(theta, dtype=float)
        lo, hi = self.lower, self.upper
        gap = np.maximum(theta[self.log] - lo[self.log], _MIN_GAP)
        u[self.log] = np.log(gap)
        m = self.logit
        width = hi[m] - lo[m]
        x = np.clip((theta[m] - lo[m]) / width, _MIN_GAP, 1.0 - _MIN_GAP)
        u[m] = np.log(x) - np.log1p(-x)
        return u

    def to_theta(self, u: np.ndarray) -> np.ndarray:
        theta = np.array(u, dtype=float)
        theta[self.log] = self.lower[self.log] + np.exp(u[self.log])
        m = self.logit
        theta[m] = self.lower[m] + (self.upper[m] - self.lower[m]) * expit(u[m])
        return theta

    def derivs(self, theta, grad, hess):
        """Gradient and Hessian in working coordinates."""
        lo, hi = self.lower, self.upper
        s = np.ones_like(theta)  # d theta / d u
        c = np.zeros_like(theta)  # d2 theta / d u2
        s[self.log] = c[self.log] = theta[self.log] - lo[self.log]
        m = self.logit
        width = hi[m] - lo[m]
        s[m] = (theta[m] - lo[m]) * (hi[m] - theta[m]) / width
        c[m] = s[m] * (hi[m] + lo[m] - 2.0 * theta[m]) / width
        gu = grad * s
        hu = hess * np.outer(s, s)
        hu[np.diag_indices_from(hu)] += grad * c
        return gu, hu


def _newton_direction(gu: np.ndarray, hu: np.ndarray) -> np.ndarray:
    A = -0.5 * (hu + hu.T)
    scale = max(1.0, float(np.max(np.abs(np.diag(A))))) if A.size else 1.0
    shift = 0.0
    for _ in range(60):
        try:
            L = np.linalg.cholesky(A + shift * np.eye(A.shape[0]))
            y = np.linalg.solve(L, gu)
            return np.linalg.solve(L.T, y)
        except np.linalg.LinAlgError:
            shift = max(2.0 * shift, 1e-10 * scale)
    return gu / scale


def _ascend(fun, fun_derivs, tr, u, gtol, max_iter, max_step):
    theta = tr.to_theta(u)
    value, grad, hess = fun_derivs(theta)
    if not np.isfinite(value):
        raise FloatingPointError("objective is not finite at the starting point")
    history = [value]
    converged = False
    message = "maximum number of iterations reached"
    it = 0
    for it in range(1, max_iter + 1):
        gu, hu = tr.derivs(theta, grad, hess)
        if np.max(np.abs(gu), initial=0.0) <= gtol:
            converged = True
            message = "gradient tolerance reached"
            it -= 1
            break
        d = _newton_direction(gu, hu)
        big = np.max(np.abs(d))
        if big > max_step:
            d *= max_step / big
        slope = float(gu @ d)
        if slope <= 0:
            d, slope = gu.copy(), float(gu @ gu)
            big = np.max(np.abs(d))
            if big > max_step:
                d *= max_step / big
                slope = float(gu @ d)
        t = 1.0
        accepted = False
        for _ in range(50):
            cand = tr.to_theta(u + t * d)
            val = fun(cand)
            if np.isfinite(val) and val >= value + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            message = "line search failed"
            converged = np.max(np.abs(gu)) <= 100 * gtol
            break
        u = u + t * d
        theta = tr.to_theta(u)
        value, grad, hess = fun_derivs(theta)
        history.append(value)
        log.debug("iter %d value %.12g |g| %.3g step %.3g", it, value, np.max(np.abs(gu)), t)
    return OptimResult(theta, value, grad, hess, converged, it, history, message), u


def _pinned(res: OptimResult, tr: _Transform, tol: float = 1e-6) -> np.ndarray:
    """Bounded entries sitting at their bound while the objective still pulls inward."""
    gap = res.theta - tr.lower
    return np.flatnonzero(tr.log & (gap < tol) & (res.gradient > 0))


def maximize(
    fun,
    fun_derivs,
    theta0: np.ndarray,
    lower: np.ndarray,
    gtol: float = 1e-6,
    max_iter: int = 500,
    max_step: float = 2.0,
    max_releases: int = 5,
    release_gap: float = 1e-3,
    upper: np.ndarray | None = None,
) -> OptimResult:
    """Maximize ``fun`` starting at ``theta0``.

    Parameters
    ----------
    fun : theta -> value (``-inf`` marks an invalid point)
    fun_derivs : theta -> (value, gradient, Hessian)
    lower : per-entry lower bounds; finite entries are log-transformed
    upper : optional per-entry upper bounds; entries with both bounds are
        logit-transformed
    gtol : convergence threshold on the max-norm of the working gradient
    max_step : cap on the max-norm of a working-coordinate step
    max_releases : restarts allowed for entries stuck at a bound while the
        gradient points into the interior
    release_gap : distance from the bound used for a release when the
        curvature gives no guidance
    """
    tr = _Transform(lower, upper)
    u = tr.to_u(np.asarray(theta0, dtype=float))
    res, u = _ascend(fun, fun_derivs, tr, u, gtol, max_iter, max_step)
    total = res.iterations
    # The log transform cannot leave a bound once it gets there; release
    # pinned entries to the interior point suggested by their curvature and
    # keep the restart only if it improves the objective.
    for _ in range(max_releases):
        idx = _pinned(res, tr)
        if idx.size == 0 or total >= max_iter:
            break
        curv = -np.diag(res.hessian)[idx]
        gap = np.where(curv > 0, res.gradient[idx] / np.where(curv > 0, curv, 1.0), release_gap)
        u_new = u.copy()
        u_new[idx] = np.log(np.clip(gap, 1e-6, 1.0))
        try:
            trial, u_trial = _ascend(fun, fun_derivs, tr, u_new, gtol, max_iter - total, max_step)
        except FloatingPointError:
            break
        total += trial.iterations + 1
        if not trial.value > res.value:
            break
        log.debug("released %s: %.12g -> %.12g", idx.tolist(), res.value, trial.value)
        trial.history = res.history + trial.history
        res, u = trial, u_trial
    res.iterations = total
    return res
