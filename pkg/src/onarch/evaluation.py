"""Model diagnostics and comparisons.

* residual diagnostics (returns divided by predicted volatility);
* baseline ratios ``s^2 / <sigma^2>``;
* conversions between daily and intra-day/overnight volatility predictions;
* in-sample / out-of-sample comparison of the bivariate model against a
  standard daily ARCH on two halves of the stock pool;
* a Wald test of parameter universality between two fits.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .calibration import FitResult, NuEstimate, calibrate, estimate_nu
from .data import ReturnPanel, pooled_moments
from .likelihood import student_loglik, valid_mask
from .model import DAILY, DAY, NIGHT, BivariateModel, DailyArchParams, EquationParams, as_arrays, make_series, variance_path

log = logging.getLogger(__name__)

N_CDF_THRESHOLDS = 50


# ---------------------------------------------------------------------------
# residuals


@dataclass
class ResidualDiagnostics:
    """Residuals ``xi = r / sigma`` per return type ("D", "N" or "r").

    ``cdf_table[k]`` holds ``(threshold, P(|xi| > threshold))`` pairs on a
    log-spaced grid; ``kurtosis[k]`` is ``None`` when the fitted ``nu <= 4``
    makes the population kurtosis infinite.
    """

    residuals: dict[str, np.ndarray]
    sigma2: dict[str, np.ndarray]
    nu_fit: dict[str, NuEstimate | None]
    cdf_table: dict[str, np.ndarray]
    kurtosis: dict[str, float | None]
    sample_kurtosis: dict[str, float]
    variance: dict[str, float]
    degenerate: dict[str, bool]

    def to_dict(self) -> dict:
        return {
            k: {
                "n": int(self.residuals[k].size),
                "variance": self.variance[k],
                "nu": None if self.nu_fit[k] is None else self.nu_fit[k].__dict__,
                "kurtosis": self.kurtosis[k],
                "sample_kurtosis": self.sample_kurtosis[k],
                "degenerate": self.degenerate[k],
                "cdf": self.cdf_table[k].tolist(),
            }
            for k in self.residuals
        }


def tail_cdf(x: np.ndarray, n: int = N_CDF_THRESHOLDS) -> np.ndarray:
    """``(y, P(|x| > y))`` on ``n`` log-spaced thresholds spanning the sample."""
    a = np.sort(np.abs(np.asarray(x, dtype=float).ravel()))
    pos = a[a > 0]
    if pos.size == 0:
        return np.column_stack([np.logspace(-2, 1, n), np.zeros(n)])
    lo = max(pos[0], 1e-3 * pos[-1])
    y = np.logspace(np.log10(lo), np.log10(pos[-1]), n)
    p = 1.0 - np.searchsorted(a, y, side="right") / a.size
    return np.column_stack([y, p])


def cdf_csv(table: np.ndarray) -> str:
    lines = ["threshold,p_exceed"]
    lines += [f"{y:.10g},{p:.10g}" for y, p in table]
    return "\n".join(lines) + "\n"


def predicted_variances(model, returns, q: int | None = None, variance_shares=None) -> dict[str, np.ndarray]:
    """Full-length predicted variance paths keyed by return type.

    A bivariate model predicts "D" and "N"; a daily ARCH predicts "r" and,
    when ``variance_shares`` are given, proportional "D" and "N" shares.
    """
    rD, rN = as_arrays(returns)
    series = make_series(rD, rN)
    if isinstance(model, BivariateModel):
        return {"D": variance_path(model.day, series, model.q), "N": variance_path(model.night, series, model.q)}
    if isinstance(model, DailyArchParams):
        if q is None:
            raise ValueError("q is required for a daily ARCH model")
        r = np.where(np.isfinite(rD) & np.isfinite(rN), rD + rN, np.nan)
        s = variance_path(model, make_series(r, np.zeros_like(r)), q)
        out = {"r": s}
        if variance_shares is not None:
            out["D"], out["N"] = equivalent_vols_daily_to_bivariate(s, variance_shares)
        return out
    raise TypeError("model must be a BivariateModel or DailyArchParams")


def _targets(returns):
    rD, rN = as_arrays(returns)
    return {"D": rD, "N": rN, "r": rD + rN}, rD, rN


def extract_residuals(model, returns, q: int | None = None, variance_shares=None) -> ResidualDiagnostics:
    """Residuals of ``returns`` under ``model`` on valid (post warm-up) points.

    Raises ``FloatingPointError`` if a predicted variance is not positive.
    """
    q = model.q if isinstance(model, BivariateModel) else q
    sig = predicted_variances(model, returns, q, variance_shares)
    ys, rD, rN = _targets(returns)
    out = {k: {} for k in ("res", "s2", "nu", "cdf", "kurt", "skurt", "var", "deg")}
    for k, s in sig.items():
        y = ys[k]
        m = valid_mask(y, rD, rN, q)
        v = s[m]
        if np.any(~(v > 0)):
            raise FloatingPointError(f"{int(np.sum(~(v > 0)))} non-positive predicted variances for {k}")
        xi = y[m] / np.sqrt(v)
        deg = bool(np.all(xi == 0))
        nu = None if deg else estimate_nu(xi)
        m2 = float(np.mean(xi * xi))
        sk = float(np.mean(xi**4) / m2**2) if m2 > 0 else float("nan")
        out["res"][k] = xi
        out["s2"][k] = v
        out["nu"][k] = nu
        out["cdf"][k] = tail_cdf(xi)
        out["kurt"][k] = None if nu is None or nu.nu <= 4 else 3.0 * (nu.nu - 2.0) / (nu.nu - 4.0)
        out["skurt"][k] = sk
        out["var"][k] = m2
        out["deg"][k] = deg
    return ResidualDiagnostics(
        out["res"], out["s2"], out["nu"], out["cdf"], out["kurt"], out["skurt"], out["var"], out["deg"]
    )


# ---------------------------------------------------------------------------
# baseline ratios


@dataclass
class BaselineRatioReport:
    rD_ratio: float
    rN_ratio: float

    @property
    def feedback_share_D(self) -> float:
        return 1.0 - self.rD_ratio

    @property
    def feedback_share_N(self) -> float:
        return 1.0 - self.rN_ratio

    def to_dict(self) -> dict:
        return {
            "rD_ratio": self.rD_ratio,
            "rN_ratio": self.rN_ratio,
            "feedback_share_D": self.feedback_share_D,
            "feedback_share_N": self.feedback_share_N,
        }


def baseline_ratio(params: EquationParams, returns, q: int) -> float:
    """``s^2`` divided by the mean filtered variance over valid points."""
    ys, rD, rN = _targets(returns)
    y = ys["D" if params.equation == DAY else "N"]
    s = variance_path(params, make_series(rD, rN), q)
    return float(params.s2 / np.mean(s[valid_mask(y, rD, rN, q)]))


def baseline_ratios(model: BivariateModel, returns) -> BaselineRatioReport:
    return BaselineRatioReport(
        baseline_ratio(model.day, returns, model.q), baseline_ratio(model.night, returns, model.q)
    )


# ---------------------------------------------------------------------------
# equivalent volatilities


def variance_shares_from_data(returns) -> tuple[float, float]:
    """``(<rD^2> / <r^2>, <rN^2> / <r^2>)`` pooled over stocks and dates."""
    m = pooled_moments(returns)
    return m["m_D"] / m["m_r"], m["m_N"] / m["m_r"]


def equivalent_vols_daily_to_bivariate(sigma2, variance_shares) -> tuple[np.ndarray, np.ndarray]:
    """Intra-day and overnight variances predicted from a daily variance."""
    s = np.asarray(sigma2, dtype=float)
    a, b = variance_shares
    return a * s, b * s


def equivalent_vol_bivariate_to_daily(sigma2_D, sigma2_N, cross_moment: float) -> np.ndarray:
    """Daily variance from intra-day and overnight ones: ``sD^2 + sN^2 + 2 <rD rN>``."""
    return np.asarray(sigma2_D, dtype=float) + np.asarray(sigma2_N, dtype=float) + 2.0 * cross_moment


# ---------------------------------------------------------------------------
# in-sample / out-of-sample comparison

TARGETS = ("D", "N", "r")
MODELS = ("bivariate", "daily_arch")


def split_halves(tickers, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic half split by hash of ``(seed, ticker)``; each half sorted by ticker."""
    keys = [hashlib.sha256(f"{seed}:{t}".encode()).hexdigest() for t in tickers]
    order = sorted(range(len(tickers)), key=lambda i: (keys[i], tickers[i]))
    half = len(order) // 2
    a = sorted(order[:half], key=lambda i: tickers[i])
    b = sorted(order[half:], key=lambda i: tickers[i])
    return a, b


@dataclass
class HalfModels:
    """Everything calibrated on one half of the stock pool."""

    bivariate: BivariateModel
    daily: DailyArchParams
    shares: tuple[float, float]
    cross_moment: float
    nu: dict[tuple[str, str], float]
    fits: dict[str, FitResult] = field(default_factory=dict)

    def variances(self, returns) -> dict[tuple[str, str], np.ndarray]:
        biv = predicted_variances(self.bivariate, returns)
        std = predicted_variances(self.daily, returns, self.bivariate.q, self.shares)
        return {
            ("D", "bivariate"): biv["D"],
            ("N", "bivariate"): biv["N"],
            ("r", "bivariate"): equivalent_vol_bivariate_to_daily(biv["D"], biv["N"], self.cross_moment),
            ("D", "daily_arch"): std["D"],
            ("N", "daily_arch"): std["N"],
            ("r", "daily_arch"): std["r"],
        }


DERIVED = {("r", "bivariate"), ("D", "daily_arch"), ("N", "daily_arch")}


def _mean_loglik(sigma2: np.ndarray, y: np.ndarray, mask: np.ndarray, nu: float) -> tuple[float, int]:
    v = sigma2[mask]
    bad = int(np.sum(~(v > 0)))
    if bad:
        return -np.inf, bad
    return float(np.mean(student_loglik(v, y[mask], nu, full=True))), 0


def calibrate_half(returns: ReturnPanel, q: int, q_free: int = 63, max_iter: int = 500) -> HalfModels:
    """Bivariate and daily ARCH calibrations plus the constants of the derived predictions."""
    fits = {}
    for target in (DAY, NIGHT, DAILY):
        try:
            fits[target] = calibrate(returns, target, q_free=q_free, q=q, max_iter=max_iter).final
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            raise RuntimeError(f"calibration of {target} on {returns.n_stocks} stocks failed: {exc}") from exc
    mom = pooled_moments(returns)
    shares = (mom["m_D"] / mom["m_r"], mom["m_N"] / mom["m_r"])
    biv = BivariateModel(fits[DAY].params, fits[NIGHT].params, q, cross_moment=mom["cross"], variance_shares=shares)
    half = HalfModels(biv, fits[DAILY].params, shares, mom["cross"], {}, fits)
    # degrees of freedom: the calibrated ones for direct predictions, a
    # one-dimensional fit on the calibration half for derived ones
    half.nu = {("D", "bivariate"): biv.day.nu, ("N", "bivariate"): biv.night.nu, ("r", "daily_arch"): half.daily.nu}
    ys, rD, rN = _targets(returns)
    var = half.variances(returns)
    for cell in DERIVED:
        y = ys[cell[0]]
        m = valid_mask(y, rD, rN, q)
        v = var[cell][m]
        if np.any(~(v > 0)):
            raise FloatingPointError(f"derived prediction {cell} has non-positive variances")
        half.nu[cell] = estimate_nu(y[m] / np.sqrt(v)).nu
    return half


@dataclass
class ISOSReport:
    """ALpp grid: ``cells[target][model] = {"IS": %, "OS": %, "derived": bool, ...}``."""

    cells: dict
    split: dict
    q: int
    seed: int
    nu: dict
    negative_variances: int

    def alpp(self, target: str, model: str, sample: str = "OS") -> float:
        return self.cells[target][model][sample]

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "seed": self.seed,
            "split": self.split,
            "cells": self.cells,
            "nu": self.nu,
            "negative_variances": self.negative_variances,
            "convention": "ALpp = 100 exp(mean Student log-density including its normalization constant)",
        }


def evaluate_halves(returns: ReturnPanel, halves, models: tuple[HalfModels, HalfModels], q: int) -> tuple[dict, int]:
    """Mean log-likelihood per cell, in-sample and out-of-sample, averaged over halves."""
    subsets = [returns.select(h) for h in halves]
    acc = {(t, m): {"IS": [], "OS": []} for t in TARGETS for m in MODELS}
    n_bad = 0
    for i, hm in enumerate(models):
        for j, sub in enumerate(subsets):
            ys, rD, rN = _targets(sub)
            var = hm.variances(sub)
            for (t, m), s in var.items():
                ll, bad = _mean_loglik(s, ys[t], valid_mask(ys[t], rD, rN, q), hm.nu[(t, m)])
                n_bad += bad
                acc[(t, m)]["IS" if i == j else "OS"].append(ll)
    cells: dict = {t: {} for t in TARGETS}
    for (t, m), d in acc.items():
        L_is, L_os = float(np.mean(d["IS"])), float(np.mean(d["OS"]))
        cells[t][m] = {
            "IS": 100.0 * np.exp(L_is),
            "OS": 100.0 * np.exp(L_os),
            "L_IS": L_is,
            "L_OS": L_os,
            "derived": (t, m) in DERIVED,
        }
    return cells, n_bad


def isos_compare(
    panel: ReturnPanel,
    q: int = 512,
    seed: int = 0,
    q_free: int = 63,
    halves=None,
    max_iter: int = 500,
) -> ISOSReport:
    """Calibrate both models on each half of the stock pool and compare ALpp in and out of sample.

    ``halves`` overrides the hash split with explicit stock index lists.
    """
    if panel.n_stocks < 4:
        raise ValueError("need at least 4 stocks to split the pool")
    halves = split_halves(panel.tickers, seed) if halves is None else (list(halves[0]), list(halves[1]))
    models = []
    for k, h in enumerate(halves):
        log.info("calibrating half %d (%d stocks)", k, len(h))
        try:
            models.append(calibrate_half(panel.select(h), q, q_free, max_iter))
        except Exception as exc:
            raise RuntimeError(f"half {k}: {exc}") from exc
    cells, n_bad = evaluate_halves(panel, halves, tuple(models), q)
    split = {f"half_{k}": [panel.tickers[i] for i in h] for k, h in enumerate(halves)}
    nu = {f"half_{k}": {f"{t}/{m}": v for (t, m), v in hm.nu.items()} for k, hm in enumerate(models)}
    return ISOSReport(cells, split, q, seed, nu, n_bad)


# ---------------------------------------------------------------------------
# universality test


@dataclass
class WaldReport:
    xi_n: float
    dof: int
    p_value: float
    tested: list[str]
    excluded_params: list[str]
    relative_differences: dict[str, float]
    n: int
    pseudo_inverse: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def relative_difference(a: float, b: float) -> float:
    """``|a - b| / max(|a|, |b|)`` (0 when both are 0)."""
    m = max(abs(a), abs(b))
    return 0.0 if m == 0 else abs(a - b) / m


def _excluded(name: str, exclude) -> bool:
    return any(name == e or name.split("_")[0] == e for e in exclude)


def wald_universality(fit1: FitResult, fit2: FitResult, exclude=("nu",)) -> WaldReport:
    """Wald test that two fits share the same parameters.

    ``f = theta1 - theta2`` restricted to non-excluded parameters; since the
    fits use disjoint samples the covariance of ``f`` is the sum of the two
    inverse Fisher informations, so ``Xi_n = f' (C1 + C2)^-1 f`` is
    asymptotically chi-squared with ``len(f)`` degrees of freedom under the
    null. Entries of ``exclude`` match parameter names exactly or by their
    leading token (``"nu"`` matches ``"nu_D"``).
    """
    if list(fit1.names) != list(fit2.names):
        raise ValueError("fits have different parameter vectors")
    keep = [i for i, n in enumerate(fit1.names) if not _excluded(n, exclude)]
    if not keep:
        raise ValueError("every parameter is excluded")
    names = [fit1.names[i] for i in keep]
    f = fit1.theta[keep] - fit2.theta[keep]
    S = fit1.covariance[np.ix_(keep, keep)] + fit2.covariance[np.ix_(keep, keep)]
    S = 0.5 * (S + S.T)
    pinv = False
    try:
        c = np.linalg.cholesky(S)
        z = np.linalg.solve(c, f)
        xi = float(z @ z)
    except np.linalg.LinAlgError:
        pinv = True
        xi = float(f @ np.linalg.pinv(S) @ f)
    dof = len(keep)
    p = float(gammaincc(dof / 2.0, max(xi, 0.0) / 2.0))
    rel = {n: relative_difference(float(fit1.theta[i]), float(fit2.theta[i])) for n, i in zip(names, keep)}
    excluded = [n for n in fit1.names if n not in names]
    return WaldReport(max(xi, 0.0), dof, p, names, excluded, rel, min(fit1.n_points, fit2.n_points), pinv)
