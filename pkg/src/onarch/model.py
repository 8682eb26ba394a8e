"""Bivariate intra-day/overnight ARCH model: parameters, filtering, quadratic forms.

Regressor layout
----------------
Both volatility equations are linear combinations of lagged "series"
(signed returns, squared returns and cross products). Each kernel enters
through one :class:`Term`, whose contribution at date ``t`` is::

    sum_{j=1..n} K(j) * x[t - j + offset]

The day equation sees the same-day overnight return, so its overnight-indexed
terms carry ``offset=1``: ``K_NN(j)`` multiplies ``rN[t-j+1]`` for
``j = 1..q+1`` and ``K_DN(j)`` multiplies ``rD[t-j] * rN[t-j+1]``. The night
equation uses lags ``1..q`` throughout; its ``K_DN`` term pairs
``rD[t-j-1]`` with ``rN[t-j]`` and stops at ``j = q-1`` so that every
regressor stays inside the ``q``-day window. With these index sets the
quadratic part is exactly ``R' K R`` over the regressor vectors returned by
:func:`regressor_vector`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from scipy import fft as sp_fft

from .kernels import KernelSpec

DAY = "day"
NIGHT = "night"
DAILY = "daily"

BIVARIATE_KERNELS = ("K_DD", "K_NN", "K_ND", "K_DN", "L_D", "L_N")
DAILY_KERNELS = ("K", "L")
QUADRATIC = ("K_DD", "K_NN", "K_ND", "K_DN", "K")


@dataclass(frozen=True)
class Term:
    kernel: str
    series: str
    n: int
    offset: int = 0

    @property
    def max_lag(self) -> int:
        return self.n - self.offset


def layout(equation: str, q: int) -> tuple[Term, ...]:
    """Terms of the volatility equation ``equation`` with maximum lag ``q``."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if equation == DAY:
        return (
            Term("L_D", "rD", q),
            Term("K_DD", "rD2", q),
            Term("K_ND", "P2", q),
            Term("L_N", "rN", q + 1, 1),
            Term("K_NN", "rN2", q + 1, 1),
            Term("K_DN", "Q2", q, 1),
        )
    if equation == NIGHT:
        return (
            Term("L_N", "rN", q),
            Term("K_NN", "rN2", q),
            Term("K_ND", "P2", q),
            Term("L_D", "rD", q),
            Term("K_DD", "rD2", q),
            Term("K_DN", "Q2", q - 1),
        )
    if equation == DAILY:
        return (Term("L", "r", q), Term("K", "r2", q))
    raise ValueError(f"unknown equation {equation!r}")


def term_lengths(equation: str, q: int) -> dict[str, int]:
    return {t.kernel: t.n for t in layout(equation, q)}


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class EquationParams:
    """Parameter set of one volatility equation (day or night)."""

    equation: str
    s2: float
    K_DD: KernelSpec
    K_NN: KernelSpec
    K_ND: KernelSpec
    K_DN: KernelSpec
    L_D: KernelSpec
    L_N: KernelSpec
    nu: float

    kernel_names = BIVARIATE_KERNELS

    def __post_init__(self) -> None:
        if self.equation not in (DAY, NIGHT):
            raise ValueError(f"equation must be 'day' or 'night', got {self.equation!r}")
        if not self.nu > 2:
            raise ValueError(f"nu must be > 2, got {self.nu}")

    def kernel(self, name: str) -> KernelSpec:
        return getattr(self, name)

    def replace(self, **changes) -> "EquationParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"equation": self.equation, "s2": self.s2, "nu": self.nu}
        for name in self.kernel_names:
            out[name] = self.kernel(name).to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EquationParams":
        kernels = {k: KernelSpec.from_dict(d[k]) for k in BIVARIATE_KERNELS}
        return cls(equation=d["equation"], s2=float(d["s2"]), nu=float(d["nu"]), **kernels)

    @classmethod
    def zero(cls, equation: str, s2: float = 1.0, nu: float = 1e6) -> "EquationParams":
        z = KernelSpec.powerlaw(0.0, 0.0, 0.0)
        ze = KernelSpec.exponential(0.0, 0.0)
        return cls(equation, s2, z, z, z, z, ze, ze, nu)


@dataclass
class DailyArchParams:
    """Standard ARCH on close-to-close returns: one quadratic and one leverage kernel."""

    s2: float
    K: KernelSpec
    L: KernelSpec
    nu: float
    equation: str = field(default=DAILY, init=False)

    kernel_names = DAILY_KERNELS

    def __post_init__(self) -> None:
        if not self.nu > 2:
            raise ValueError(f"nu must be > 2, got {self.nu}")

    def kernel(self, name: str) -> KernelSpec:
        return getattr(self, name)

    def replace(self, **changes) -> "DailyArchParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "equation": DAILY,
            "s2": self.s2,
            "nu": self.nu,
            "K": self.K.to_dict(),
            "L": self.L.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DailyArchParams":
        return cls(
            s2=float(d["s2"]),
            K=KernelSpec.from_dict(d["K"]),
            L=KernelSpec.from_dict(d["L"]),
            nu=float(d["nu"]),
        )


Params = EquationParams | DailyArchParams


def params_from_dict(d: dict[str, Any]) -> Params:
    if d.get("equation") == DAILY:
        return DailyArchParams.from_dict(d)
    return EquationParams.from_dict(d)


@dataclass
class BivariateModel:
    """Day and night equations sharing one maximum lag.

    ``cross_moment`` is the pooled ``<rD rN>``; ``variance_shares`` holds the
    pooled ``<rD^2>/<r^2>`` and ``<rN^2>/<r^2>`` used to turn a daily variance
    into intra-day and overnight predictions.
    """

    day: EquationParams
    night: EquationParams
    q: int
    cross_moment: float = 0.0
    variance_shares: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        if self.day.equation != DAY or self.night.equation != NIGHT:
            raise ValueError("day/night parameter sets are swapped")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        for params in (self.day, self.night):
            for t in layout(params.equation, self.q):
                if params.kernel(t.kernel).max_lag < t.n:
                    raise ValueError(
                        f"{params.equation} kernel {t.kernel} has fewer than {t.n} lags"
                    )

    def equation(self, name: str) -> EquationParams:
        return {DAY: self.day, NIGHT: self.night}[name]

    def to_dict(self) -> dict[str, Any]:
        return {
            "q": self.q,
            "cross_moment": self.cross_moment,
            "variance_shares": list(self.variance_shares),
            "day": self.day.to_dict(),
            "night": self.night.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BivariateModel":
        return cls(
            day=EquationParams.from_dict(d["day"]),
            night=EquationParams.from_dict(d["night"]),
            q=int(d["q"]),
            cross_moment=float(d.get("cross_moment", 0.0)),
            variance_shares=tuple(d.get("variance_shares", (0.5, 0.5))),
        )


def load_params(path: str | Path) -> Params:
    with open(path) as fh:
        return params_from_dict(json.load(fh))


def _reference_file(equation: str) -> dict[str, Any]:
    name = {DAY: "params_us_day.json", NIGHT: "params_us_night.json"}[equation]
    return json.loads(resources.files("onarch.resources").joinpath(name).read_text())


def reference_params(equation: str) -> EquationParams:
    """Bundled US-stock estimates for the day or night equation (q = 512)."""
    return EquationParams.from_dict(_reference_file(equation))


def reference_stderr(equation: str) -> dict[str, Any]:
    """Standard errors of the bundled estimates, nested by kernel."""
    return _reference_file(equation).get("stderr", {})


def reference_model(q: int = 512) -> BivariateModel:
    return BivariateModel(reference_params(DAY), reference_params(NIGHT), q=q)


# ---------------------------------------------------------------------------
# series and filtering


def as_arrays(returns) -> tuple[np.ndarray, np.ndarray]:
    """(rD, rN) as 2-D float arrays of shape (n_stocks, n_dates)."""
    if hasattr(returns, "rD") and hasattr(returns, "rN"):
        rD, rN = returns.rD, returns.rN
    else:
        rD, rN = returns
    rD = np.atleast_2d(np.asarray(rD, dtype=float))
    rN = np.atleast_2d(np.asarray(rN, dtype=float))
    if rD.shape != rN.shape:
        raise ValueError(f"intra-day and overnight shapes differ: {rD.shape} vs {rN.shape}")
    return rD, rN


def make_series(rD: np.ndarray, rN: np.ndarray) -> dict[str, np.ndarray]:
    """Regressor series; missing returns contribute nothing."""
    d = np.nan_to_num(rD, nan=0.0)
    n = np.nan_to_num(rN, nan=0.0)
    q2 = np.zeros_like(d)
    q2[:, 1:] = 2.0 * d[:, :-1] * n[:, 1:]
    r = d + n
    return {
        "rD": d,
        "rD2": d * d,
        "P2": 2.0 * d * n,
        "rN": n,
        "rN2": n * n,
        "Q2": q2,
        "r": r,
        "r2": r * r,
    }


def lag_filter(term: Term, kernel_values: np.ndarray) -> np.ndarray:
    """Causal filter taps a[l], l = 0..max_lag, for the given term."""
    a = np.zeros(term.max_lag + 1)
    a[1 - term.offset :] = kernel_values[: term.n]
    return a


def fft_size(n_dates: int, q: int) -> int:
    return sp_fft.next_fast_len(n_dates + q + 2, real=True)


def causal_convolve(x: np.ndarray, taps: np.ndarray, nfft: int | None = None) -> np.ndarray:
    """y[..., t] = sum_l taps[l] x[..., t - l] along the last axis of ``x``.

    ``taps`` may carry extra trailing columns (shape (L,) or (L, m)); the
    output then has shape x.shape + (m,).
    """
    T = x.shape[-1]
    L = taps.shape[0]
    nfft = nfft or sp_fft.next_fast_len(T + L, real=True)
    X = sp_fft.rfft(x, nfft, axis=-1)
    A = sp_fft.rfft(taps, nfft, axis=0)
    if taps.ndim == 1:
        return sp_fft.irfft(X * A, nfft, axis=-1)[..., :T]
    y = sp_fft.irfft(X[..., :, None] * A, nfft, axis=-2)
    return y[..., :T, :]


def kernel_vector(params: Params, term: Term) -> np.ndarray:
    return params.kernel(term.kernel).values(term.n)


def variance_path(params: Params, series: dict[str, np.ndarray], q: int) -> np.ndarray:
    """Conditional variance for every date (warm-up dates included, unreliable)."""
    total = None
    for term in layout(params.equation, q):
        taps = lag_filter(term, kernel_vector(params, term))
        c = causal_convolve(series[term.series], taps)
        total = c if total is None else total + c
    return total + params.s2


@dataclass
class FilterResult:
    """Filtered variances for dates q..T-1 (warm-up dropped)."""

    sigma2: np.ndarray
    n_negative: int
    min_value: float

    @classmethod
    def from_array(cls, sigma2: np.ndarray) -> "FilterResult":
        finite = sigma2[np.isfinite(sigma2)]
        return cls(
            sigma2=sigma2,
            n_negative=int(np.sum(finite <= 0)),
            min_value=float(finite.min()) if finite.size else np.nan,
        )


def _check_history(T: int, q: int) -> None:
    if T < q + 1:
        raise ValueError(f"history of {T} dates is shorter than q + 1 = {q + 1}")


def filter_volatility(model: BivariateModel, returns) -> tuple[FilterResult, FilterResult]:
    """Day and night conditional variances implied by past returns.

    Negative values are reported, never clamped.
    """
    rD, rN = as_arrays(returns)
    _check_history(rD.shape[1], model.q)
    series = make_series(rD, rN)
    out = []
    for params in (model.day, model.night):
        s2 = variance_path(params, series, model.q)[:, model.q :]
        out.append(FilterResult.from_array(s2))
    return out[0], out[1]


def filter_daily_arch(params: DailyArchParams, r, q: int) -> FilterResult:
    """Conditional variance of a standard daily ARCH with leverage."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    _check_history(r.shape[1], q)
    series = make_series(r, np.zeros_like(r))
    return FilterResult.from_array(variance_path(params, series, q)[:, q:])


def filter_equation(params: Params, returns, q: int) -> FilterResult:
    rD, rN = as_arrays(returns)
    _check_history(rD.shape[1], q)
    return FilterResult.from_array(variance_path(params, make_series(rD, rN), q)[:, q:])


# ---------------------------------------------------------------------------
# quadratic-form representation


def regressor_labels(equation: str, q: int) -> list[tuple[str, int]]:
    """(return type, lag) for each entry of the regressor vector."""
    if equation == DAY:
        return [("D", k) for k in range(1, q + 1)] + [("N", k) for k in range(0, q + 1)]
    if equation == NIGHT:
        return [("D", k) for k in range(1, q + 1)] + [("N", k) for k in range(1, q + 1)]
    if equation == DAILY:
        return [("r", k) for k in range(1, q + 1)]
    raise ValueError(f"unknown equation {equation!r}")


def regressor_vector(returns, stock: int, t: int, equation: str, q: int) -> np.ndarray:
    """Stacked lagged returns R_t for one stock at date index ``t``."""
    rD, rN = as_arrays(returns)
    d, n = np.nan_to_num(rD[stock]), np.nan_to_num(rN[stock])
    out = []
    for kind, lag in regressor_labels(equation, q):
        src = {"D": d, "N": n, "r": d + n}[kind]
        out.append(src[t - lag])
    return np.array(out)


def build_quadratic_matrix(params: Params, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric matrix K and leverage vector L with sigma2 = s2 + R'KR + L'R."""
    labels = regressor_labels(params.equation, q)
    index = {lab: i for i, lab in enumerate(labels)}
    dim = len(labels)
    K = np.zeros((dim, dim))
    L = np.zeros(dim)

    def add(i, j, value):
        if i == j:
            K[i, i] += value
        else:
            K[i, j] += value
            K[j, i] += value

    for term in layout(params.equation, q):
        k = kernel_vector(params, term)
        for j in range(1, term.n + 1):
            lag = j - term.offset
            c = k[j - 1]
            if term.series == "rD":
                L[index[("D", lag)]] += c
            elif term.series == "rN":
                L[index[("N", lag)]] += c
            elif term.series == "r":
                L[index[("r", lag)]] += c
            elif term.series == "rD2":
                add(index[("D", lag)], index[("D", lag)], c)
            elif term.series == "rN2":
                add(index[("N", lag)], index[("N", lag)], c)
            elif term.series == "r2":
                add(index[("r", lag)], index[("r", lag)], c)
            elif term.series == "P2":
                add(index[("D", lag)], index[("N", lag)], c)
            elif term.series == "Q2":
                add(index[("D", lag + 1)], index[("N", lag)], c)
    return K, L


def bordered_matrix(params: Params, q: int) -> np.ndarray:
    """M = [[K, L/2], [L'/2, s2]] so that sigma2 = (R, 1)' M (R, 1)."""
    K, L = build_quadratic_matrix(params, q)
    dim = K.shape[0]
    M = np.zeros((dim + 1, dim + 1))
    M[:dim, :dim] = K
    M[:dim, dim] = M[dim, :dim] = 0.5 * L
    M[dim, dim] = params.s2
    return M


def integrated_kernels(params: Params, q: int) -> dict[str, float]:
    """Sum of each kernel over the lags its term actually uses."""
    return {t.kernel: float(kernel_vector(params, t).sum()) for t in layout(params.equation, q)}


def iter_kernels(params: Params) -> Iterable[tuple[str, KernelSpec]]:
    for name in params.kernel_names:
        yield name, params.kernel(name)
