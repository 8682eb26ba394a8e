"""Monte Carlo generation of return panels from the bivariate or daily model.

Each stock draws its residuals from its own Philox stream keyed by
``(seed, stock, return type)``, so panels are reproducible and independent of
how work is split. Within a date the overnight return is generated first
(its variance only sees earlier dates), then the intra-day return, whose
variance already sees the same-day overnight return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ReturnPanel
from .model import DAILY, BivariateModel, DailyArchParams, Params, layout


class NegativeVarianceError(FloatingPointError):
    """A simulated conditional variance was negative."""


class UnstableModelError(ValueError):
    """The model fails the stability check and ``force`` was not given."""


def _generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def student_draws(rng: np.random.Generator, nu: float, n: int) -> np.ndarray:
    if not nu > 2:
        raise ValueError(f"nu must be > 2, got {nu}")
    if np.isinf(nu):
        return rng.standard_normal(n)
    return rng.standard_t(nu, n) * np.sqrt((nu - 2.0) / nu)


def sample_student(nu: float, n: int, seed: int = 0) -> np.ndarray:
    """``n`` i.i.d. Student draws rescaled to unit variance (``nu = inf``: Gaussian)."""
    return student_draws(_generator(seed), nu, n)


@dataclass
class SimConfig:
    n_stocks: int
    horizon: int
    seed: int
    model: BivariateModel | DailyArchParams
    burn_in: int | None = None
    q: int | None = None
    variance_shares: tuple[float, float] | None = None
    on_negative: str = "raise"

    def __post_init__(self) -> None:
        if self.n_stocks < 1 or self.horizon < 1:
            raise ValueError("n_stocks and horizon must be >= 1")
        if isinstance(self.model, BivariateModel):
            self.q = self.model.q
        elif self.q is None:
            raise ValueError("q is required for a daily ARCH model")
        if self.burn_in is None:
            self.burn_in = max(10 * self.q, 5000)
        if self.burn_in < self.q:
            raise ValueError("burn_in must be >= q")
        if self.on_negative not in ("raise", "count"):
            raise ValueError("on_negative must be 'raise' or 'count'")


@dataclass
class SimDiagnostics:
    n_negative: int
    min_variance: float
    burn_in_negative: int
    mean_variance_day: float
    mean_variance_night: float


@dataclass
class SimResult:
    panel: ReturnPanel
    diagnostics: SimDiagnostics


class _History:
    """Zero-padded history of every regressor series, filled date by date."""

    def __init__(self, n: int, total: int, pad: int):
        self.pad = pad
        names = ("rD", "rN", "rD2", "rN2", "P2", "Q2", "r", "r2")
        self.x = {k: np.zeros((n, pad + total)) for k in names}

    def contribution(self, term, kernel_rev: np.ndarray, t: int) -> np.ndarray:
        # lags j - offset for j = 1..n  ->  positions t - n + offset .. t - 1 + offset
        i = self.pad + t
        window = self.x[term.series][:, i - term.n + term.offset : i + term.offset]
        return np.einsum("ij,j->i", window, kernel_rev)


def _reversed_kernels(params: Params, q: int):
    return [(t, params.kernel(t.kernel).values(t.n)[::-1].copy()) for t in layout(params.equation, q)]


def _variance(hist: _History, params: Params, kernels, t: int) -> np.ndarray:
    s = np.full(next(iter(hist.x.values())).shape[0], params.s2, dtype=float)
    for term, krev in kernels:
        s += hist.contribution(term, krev, t)
    return s


def _handle_negative(s: np.ndarray, mode: str, eq: str, t: int, stats: dict, burning: bool) -> np.ndarray:
    bad = s < 0
    if burning:
        if bad.any():
            stats["burn_in_negative"] += int(bad.sum())
            return np.maximum(s, 0.0)
        return s
    stats["min"] = min(stats["min"], float(s.min()))
    if not bad.any():
        return s
    stats["n_negative"] += int(bad.sum())
    if mode == "raise":
        i = int(np.flatnonzero(bad)[0])
        raise NegativeVarianceError(
            f"{eq} variance {s[i]:.6g} < 0 for stock {i} at simulated step {t}"
        )
    return np.maximum(s, 0.0)


def _split_weights(share_d: float, share_n: float) -> tuple[float, float, float]:
    """Weights with ``rD = a r + c sigma u``, ``rN = b r - c sigma u``, ``a + b = 1``.

    They give ``E[rD^2] = share_d sigma^2`` and ``E[rN^2] = share_n sigma^2``
    for independent unit-variance ``r / sigma`` and ``u``.
    """
    a = 0.5 * (1.0 + share_d - share_n)
    c2 = share_d - a * a
    if share_d < 0 or share_n < 0 or c2 < 0:
        raise ValueError(f"variance shares {share_d}, {share_n} cannot split a daily return")
    return a, 1.0 - a, float(np.sqrt(c2))


def _dates(n: int, start: str = "2000-01-03") -> np.ndarray:
    return np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")


def simulate_panel(config: SimConfig, force: bool = False, return_diagnostics: bool = False):
    """Simulate returns; the burn-in starts from an all-zero history and is discarded.

    Negative variances on reported dates raise :class:`NegativeVarianceError`
    unless ``config.on_negative == "count"``, in which case they are counted
    and the variance is floored at zero for that draw. During burn-in the
    history is not yet representative of the stationary regime (a model with
    zero baseline and leverage can dip below zero while the history is
    nearly empty); negatives there are floored and counted separately.

    For a daily ARCH model the daily return is ``sigma xi`` with a Student
    residual ``xi``; it is split into intra-day and overnight parts carrying
    the configured variance shares (default 0.5 / 0.5) with the help of an
    independent auxiliary draw, so the parts always add up to the daily return.
    """
    model = config.model
    if isinstance(model, BivariateModel) and not force:
        from .validity import check_stability

        rep = check_stability(model)
        if not rep.stable:
            raise UnstableModelError(
                f"model is unstable (spectral radius {rep.spectral_radius:.4f}); use force to override"
            )
    N, T, q = config.n_stocks, config.horizon, config.q
    total = config.burn_in + T
    hist = _History(N, total, q + 2)
    xi_D = np.empty((N, total))
    xi_N = np.empty((N, total))
    nu_D, nu_N = (model.day.nu, model.night.nu) if isinstance(model, BivariateModel) else (model.nu, model.nu)
    for i in range(N):
        xi_N[i] = student_draws(_generator(config.seed, i, 0), nu_N, total)
        xi_D[i] = student_draws(_generator(config.seed, i, 1), nu_D, total)
    stats = {"n_negative": 0, "burn_in_negative": 0, "min": np.inf}
    sum_d = np.zeros(N)
    sum_n = np.zeros(N)
    p = hist.pad
    x = hist.x
    if isinstance(model, BivariateModel):
        k_day = _reversed_kernels(model.day, q)
        k_night = _reversed_kernels(model.night, q)
        for t in range(total):
            sN = _handle_negative(_variance(hist, model.night, k_night, t), config.on_negative, "overnight", t, stats, t < config.burn_in)
            rN = np.sqrt(sN) * xi_N[:, t]
            x["rN"][:, p + t] = rN
            x["rN2"][:, p + t] = rN * rN
            x["Q2"][:, p + t] = 2.0 * x["rD"][:, p + t - 1] * rN
            sD = _handle_negative(_variance(hist, model.day, k_day, t), config.on_negative, "intra-day", t, stats, t < config.burn_in)
            rD = np.sqrt(sD) * xi_D[:, t]
            x["rD"][:, p + t] = rD
            x["rD2"][:, p + t] = rD * rD
            x["P2"][:, p + t] = 2.0 * rD * rN
            if t >= config.burn_in:
                sum_d += sD
                sum_n += sN
    else:
        if model.equation != DAILY:
            raise TypeError("model must be a BivariateModel or DailyArchParams")
        share_d, share_n = config.variance_shares or (0.5, 0.5)
        a, b, c = _split_weights(share_d, share_n)
        k_daily = _reversed_kernels(model, q)
        # xi_N holds the daily residual, xi_D the auxiliary split draw
        for t in range(total):
            s = _handle_negative(_variance(hist, model, k_daily, t), config.on_negative, "daily", t, stats, t < config.burn_in)
            sig = np.sqrt(s)
            r = sig * xi_N[:, t]
            u = c * sig * xi_D[:, t]
            x["rD"][:, p + t] = a * r + u
            x["rN"][:, p + t] = r - x["rD"][:, p + t]
            x["r"][:, p + t] = r
            x["r2"][:, p + t] = r * r
            if t >= config.burn_in:
                sum_d += share_d * s
                sum_n += share_n * s
    keep = slice(p + config.burn_in, p + total)
    tickers = [f"S{i:04d}" for i in range(N)]
    panel = ReturnPanel.from_components(tickers, _dates(T), x["rD"][:, keep].copy(), x["rN"][:, keep].copy())
    if not return_diagnostics:
        return panel
    diag = SimDiagnostics(
        n_negative=stats["n_negative"],
        min_variance=stats["min"],
        burn_in_negative=stats["burn_in_negative"],
        mean_variance_day=float(sum_d.mean() / T),
        mean_variance_night=float(sum_n.mean() / T),
    )
    return SimResult(panel, diag)
