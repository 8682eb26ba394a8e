"""Student-t panel likelihood with exact first and second derivatives.

The engine works on a parameter vector ``theta`` produced by a parameter map
(:mod:`onarch.parametrization`). Conditional variances are linear in the
kernel coefficients, so for every kernel term the map supplies the kernel
values together with their Jacobian (and Hessian) with respect to
``theta``; the engine contracts those with the Student score:

* value:    sigma2 = s2 + sum_s conv(x_s, k_s), one inverse FFT per call
* gradient: sum_s J_s' G_s with G_s the cross-correlation of the score with
  the series x_s, summed over stocks in the frequency domain
* Hessian:  Z' diag(f_vv) Z + sum_s G_s . H_s (+ degrees-of-freedom terms),
  with Z = d sigma2 / d theta built in stock chunks

All quantities are means over valid (stock, date) points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft
from scipy.special import digamma, gammaln, polygamma

from .model import (
    DAILY,
    DAY,
    NIGHT,
    Params,
    as_arrays,
    fft_size,
    layout,
    lag_filter,
    make_series,
)
from .parallel import get_threads, ordered_map, ordered_sum

_LOG_PI = np.log(np.pi)
_CHUNK_DOUBLES = 4_000_000


# ---------------------------------------------------------------------------
# Student density


def student_constant(nu: float) -> float:
    """ln Gamma((nu+1)/2) - ln Gamma(nu/2) - ln(pi)/2."""
    return float(gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * _LOG_PI)


def student_loglik(sigma2, r, nu, full: bool = True):
    """Log-density of ``r`` under a unit-variance Student law scaled by sigma.

    With ``full=False`` the nu-dependent normalization constant is dropped,
    leaving ``nu/2 ln((nu-2) sigma2) - (nu+1)/2 ln((nu-2) sigma2 + r^2)``.
    ``nu = inf`` gives the Gaussian log-density (``full`` is then ignored).
    Non-positive variances give ``-inf``.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    r = np.asarray(r, dtype=float)
    if not nu > 2:
        raise ValueError(f"nu must be > 2, got {nu}")
    with np.errstate(divide="ignore", invalid="ignore"):
        if np.isinf(nu):
            out = -0.5 * np.log(2 * np.pi * sigma2) - 0.5 * r * r / sigma2
        else:
            a = nu - 2.0
            av = a * sigma2
            out = 0.5 * nu * np.log(av) - 0.5 * (nu + 1.0) * np.log(av + r * r)
            if full:
                out = out + student_constant(nu)
    out = np.where(sigma2 > 0, out, -np.inf)
    return out[()] if out.ndim == 0 else out


@dataclass
class StudentDerivs:
    """Point-wise derivatives of the full log-density w.r.t. sigma2 (v) and nu."""

    f: np.ndarray
    f_v: np.ndarray
    f_vv: np.ndarray
    f_n: np.ndarray
    f_nn: np.ndarray
    f_vn: np.ndarray


def student_derivs(v: np.ndarray, r: np.ndarray, nu: float) -> StudentDerivs:
    a = nu - 2.0
    av = a * v
    D = av + r * r
    f = student_constant(nu) + 0.5 * nu * np.log(av) - 0.5 * (nu + 1.0) * np.log(D)
    f_v = 0.5 * nu / v - 0.5 * (nu + 1.0) * a / D
    f_vv = -0.5 * nu / (v * v) + 0.5 * (nu + 1.0) * a * a / (D * D)
    f_n = (
        0.5 * digamma(0.5 * (nu + 1.0))
        - 0.5 * digamma(0.5 * nu)
        + 0.5 * np.log(av)
        + 0.5 * nu / a
        - 0.5 * np.log(D)
        - 0.5 * (nu + 1.0) * v / D
    )
    f_nn = (
        0.25 * polygamma(1, 0.5 * (nu + 1.0))
        - 0.25 * polygamma(1, 0.5 * nu)
        + 1.0 / a
        - 0.5 * nu / (a * a)
        - v / D
        + 0.5 * (nu + 1.0) * v * v / (D * D)
    )
    f_vn = 0.5 / v - 0.5 * (a + nu + 1.0) / D + 0.5 * (nu + 1.0) * av / (D * D)
    return StudentDerivs(f, f_v, f_vv, f_n, f_nn, f_vn)


# ---------------------------------------------------------------------------
# prepared panel


def target_returns(rD: np.ndarray, rN: np.ndarray, target: str) -> np.ndarray:
    if target == DAY:
        return rD
    if target == NIGHT:
        return rN
    if target == DAILY:
        return rD + rN
    raise ValueError(f"unknown target {target!r}")


def valid_mask(y: np.ndarray, rD: np.ndarray, rN: np.ndarray, q: int) -> np.ndarray:
    """Points entering likelihood sums: observed target, at least q dates of history."""
    seen = np.isfinite(rD) | np.isfinite(rN)
    first = np.where(seen.any(axis=1), seen.argmax(axis=1), y.shape[1])
    t = np.arange(y.shape[1])
    return np.isfinite(y) & (t[None, :] >= (first[:, None] + q))


class PanelData:
    """Returns prepared for repeated likelihood evaluation of one target.

    Missing returns contribute zero to regressors; points with a missing
    target are excluded from the sums.
    """

    def __init__(self, returns, target: str, q: int):
        rD, rN = as_arrays(returns)
        if rD.shape[1] < q + 1:
            raise ValueError(f"history of {rD.shape[1]} dates is shorter than q + 1 = {q + 1}")
        self.target = target
        self.q = q
        self.equation = target
        y = target_returns(rD, rN, target)
        self.mask = valid_mask(y, rD, rN, q)
        self.n_points = int(self.mask.sum())
        if self.n_points == 0:
            raise ValueError("no valid points after warm-up")
        self.y = np.where(self.mask, np.nan_to_num(y), 0.0)
        if target == DAILY:
            r = np.where(np.isfinite(rD) & np.isfinite(rN), rD + rN, np.nan)
            self.series = make_series(r, np.zeros_like(r))
        else:
            self.series = make_series(rD, rN)
        self.n_stocks, self.n_dates = y.shape
        self.terms = layout(target, q)
        self.nfft = fft_size(self.n_dates, q)
        self._spectra: dict[str, np.ndarray] = {}

    def spectrum(self, name: str) -> np.ndarray:
        if name not in self._spectra:
            self._spectra[name] = sp_fft.rfft(self.series[name], self.nfft, axis=1, workers=get_threads())
        return self._spectra[name]


# ---------------------------------------------------------------------------
# reports


@dataclass
class LikelihoodReport:
    loglik_per_point: float
    loglik_without_constant: float
    n_points: int
    negative_variance_count: int

    @property
    def valid(self) -> bool:
        return self.negative_variance_count == 0 and np.isfinite(self.loglik_per_point)

    @property
    def alpp(self) -> float:
        """Average likelihood per point in percent (full-density convention)."""
        return 100.0 * float(np.exp(self.loglik_per_point))

    @property
    def alpp_without_constant(self) -> float:
        return 100.0 * float(np.exp(self.loglik_without_constant))

    def to_dict(self) -> dict:
        return {
            "loglik_per_point": self.loglik_per_point,
            "loglik_without_constant": self.loglik_without_constant,
            "n_points": self.n_points,
            "negative_variance_count": self.negative_variance_count,
            "alpp": self.alpp,
            "alpp_without_constant": self.alpp_without_constant,
        }


# ---------------------------------------------------------------------------
# engine


class Likelihood:
    """Mean log-likelihood of one target as a function of a parameter vector."""

    def __init__(self, data: PanelData, pmap):
        if pmap.equation != data.equation:
            raise ValueError(f"parameter map for {pmap.equation!r}, data for {data.equation!r}")
        self.data = data
        self.pmap = pmap

    # -- variance --------------------------------------------------------
    def variance(self, theta: np.ndarray) -> np.ndarray:
        d = self.data
        spec = None
        for term in d.terms:
            k = self.pmap.kernel_values(theta, term)
            A = sp_fft.rfft(lag_filter(term, k), d.nfft)
            contrib = d.spectrum(term.series) * A
            spec = contrib if spec is None else spec + contrib
        sigma2 = sp_fft.irfft(spec, d.nfft, axis=1, workers=get_threads())[:, : d.n_dates]
        return sigma2 + self.pmap.s2(theta)

    def _points(self, theta):
        d = self.data
        v = self.variance(theta)[d.mask]
        return v, d.y[d.mask]

    # -- value -----------------------------------------------------------
    def report(self, theta: np.ndarray) -> LikelihoodReport:
        v, r = self._points(theta)
        nu = self.pmap.nu(theta)
        n_neg = int(np.sum(~(v > 0)))
        if n_neg:
            return LikelihoodReport(-np.inf, -np.inf, self.data.n_points, n_neg)
        full = float(np.mean(student_loglik(v, r, nu, full=True)))
        bare = float(np.mean(student_loglik(v, r, nu, full=False))) if np.isfinite(nu) else full
        return LikelihoodReport(full, bare, self.data.n_points, 0)

    def value(self, theta: np.ndarray) -> float:
        return self.report(theta).loglik_per_point

    # -- derivatives -------------------------------------------------------
    def _score(self, theta):
        v, r = self._points(theta)
        if np.any(~(v > 0)):
            raise FloatingPointError(
                f"{int(np.sum(~(v > 0)))} non-positive conditional variances"
            )
        return student_derivs(v, r, self.pmap.nu(theta))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        """Exact gradient of the mean log-likelihood (FFT cross-correlations)."""
        d = self.data
        sd = self._score(theta)
        n = d.n_points
        w = np.zeros((d.n_stocks, d.n_dates))
        w[d.mask] = sd.f_v / n
        W = sp_fft.rfft(w, d.nfft, axis=1, workers=get_threads())
        grad = np.zeros(self.pmap.size)
        for term in d.terms:
            cols = self.pmap.columns(term)
            if not cols:
                continue
            S = np.sum(W * np.conj(d.spectrum(term.series)), axis=0)
            corr = sp_fft.irfft(S, d.nfft)
            lags = np.arange(1, term.n + 1) - term.offset
            G = corr[lags]
            J = self.pmap.kernel_jacobian(theta, term)
            grad[cols] += J.T @ G
        i = self.pmap.s2_index
        if i is not None:
            grad[i] += np.sum(sd.f_v) / n
        j = self.pmap.nu_index
        if j is not None:
            grad[j] += np.mean(sd.f_n)
        return grad

    def _design_chunk(self, theta, rows: slice, jac_cache) -> np.ndarray:
        """d sigma2 / d theta for stocks in ``rows``; shape (n_rows, T, P)."""
        d = self.data
        X = None
        for term in d.terms:
            cols = self.pmap.columns(term)
            if not cols:
                continue
            x = d.series[term.series][rows]
            if X is None:
                X = np.zeros(x.shape + (self.pmap.size,))
            lags = np.arange(1, term.n + 1) - term.offset
            if self.pmap.is_free(term):
                T = x.shape[1]
                for c, lag in zip(cols, lags):
                    X[:, lag:, c] += x[:, : T - lag]
            else:
                J = jac_cache[term.kernel]
                taps = np.zeros((term.max_lag + 1, len(cols)))
                taps[lags] = J
                spec = d.spectrum(term.series)[rows]
                A = sp_fft.rfft(taps, d.nfft, axis=0)
                y = sp_fft.irfft(spec[:, :, None] * A[None], d.nfft, axis=1)
                X[:, :, cols] += y[:, : d.n_dates, :]
        if X is None:
            X = np.zeros((rows.stop - rows.start, d.n_dates, self.pmap.size))
        i = self.pmap.s2_index
        if i is not None:
            X[:, :, i] = 1.0
        return X

    def value_grad_hess(self, theta: np.ndarray):
        """Mean log-likelihood, gradient and Hessian at ``theta``."""
        d = self.data
        P = self.pmap.size
        sd = self._score(theta)
        n = d.n_points
        fv = np.zeros((d.n_stocks, d.n_dates))
        fvv = np.zeros_like(fv)
        fvn = np.zeros_like(fv)
        fv[d.mask] = sd.f_v
        fvv[d.mask] = sd.f_vv
        fvn[d.mask] = sd.f_vn
        jac_cache = {
            t.kernel: self.pmap.kernel_jacobian(theta, t)
            for t in d.terms
            if self.pmap.columns(t) and not self.pmap.is_free(t)
        }
        # chunk boundaries depend on the problem size only, and the partial
        # sums are added in chunk order: bit-identical at any thread count
        step = max(1, _CHUNK_DOUBLES // max(1, d.n_dates * P))

        def chunk(start):
            rows = slice(start, min(start + step, d.n_stocks))
            Z = self._design_chunk(theta, rows, jac_cache).reshape(-1, P)
            m = d.mask[rows].ravel()
            Z = Z[m]
            return (
                Z.T @ fv[rows].ravel()[m],
                (Z * fvv[rows].ravel()[m][:, None]).T @ Z,
                Z.T @ fvn[rows].ravel()[m],
            )

        grad, hess, cross_nu = ordered_sum(ordered_map(chunk, range(0, d.n_stocks, step)))
        grad /= n
        hess /= n
        cross_nu /= n
        # curvature of the kernel maps, contracted with the score correlations
        if self.pmap.has_curvature:
            W = sp_fft.rfft(fv / n, d.nfft, axis=1)
            for term in d.terms:
                cols = self.pmap.columns(term)
                if not cols or self.pmap.is_free(term):
                    continue
                Hk = self.pmap.kernel_hessian(theta, term)
                if Hk is None:
                    continue
                S = np.sum(W * np.conj(d.spectrum(term.series)), axis=0)
                corr = sp_fft.irfft(S, d.nfft)
                G = corr[np.arange(1, term.n + 1) - term.offset]
                ix = np.ix_(cols, cols)
                hess[ix] += np.einsum("j,jab->ab", G, Hk)
        j = self.pmap.nu_index
        if j is not None:
            grad[j] += np.mean(sd.f_n)
            hess[j, :] += cross_nu
            hess[:, j] += cross_nu
            hess[j, j] = np.mean(sd.f_nn)
        hess = 0.5 * (hess + hess.T)
        return float(np.mean(sd.f)), grad, hess


def panel_loglik(params: Params, returns, target: str | None = None, q: int = 512) -> LikelihoodReport:
    """Mean Student log-likelihood of ``params`` on ``returns`` (warm-up excluded)."""
    from .parametrization import StandardMap

    target = target or params.equation
    if target != params.equation:
        raise ValueError(f"parameters are for {params.equation!r}, target is {target!r}")
    data = returns if isinstance(returns, PanelData) else PanelData(returns, target, q)
    pmap = StandardMap(params, kernels=(), s2=False, nu=False)
    return Likelihood(data, pmap).report(pmap.initial())
