"""Stability and positivity checks for calibrated volatility equations.

* Stability: the average variances obey a 2x2 linear system built from the
  integrated diagonal kernels; both eigenvalues must lie inside the unit disk.
* Positivity of the quadratic part: ``R' K R >= 0`` for all regressors.
  With a single cross kernel this reduces exactly to
  ``K_ND(tau)^2 <= K_DD(tau) K_NN(tau)``. With two cross kernels the
  regressors form a chain ``N - D - N - D ...`` and a sufficient lag-by-lag
  condition is searched over the weight ``beta`` splitting each diagonal
  coefficient between its two neighbours.
* Leverage: with ``K`` positive-definite, ``s2 + R'KR + L'R >= 0`` for all
  ``R`` iff ``L' K^-1 L <= 4 s2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize_scalar

from .kernels import FREE, KernelSpec
from .model import (
    DAILY,
    DAY,
    NIGHT,
    BivariateModel,
    Params,
    build_quadratic_matrix,
    integrated_kernels,
    layout,
)

Z_95 = 1.98


# ---------------------------------------------------------------------------
# stability


def eigenvalues_2x2(a: float, b: float, c: float, d: float) -> tuple[complex, complex]:
    """Eigenvalues of [[a, b], [c, d]], larger real part first."""
    tr = a + d
    disc = (a - d) ** 2 + 4.0 * b * c
    root = np.sqrt(complex(disc)) if disc < 0 else np.sqrt(disc)
    l1, l2 = 0.5 * (tr + root), 0.5 * (tr - root)
    return (l1, l2) if np.real(l1) >= np.real(l2) else (l2, l1)


@dataclass
class StabilityReport:
    integrated: dict[str, float]
    eigenvalues: tuple
    spectral_radius: float
    stable: bool
    fixed_point: tuple[float, float] | None

    def to_dict(self) -> dict:
        ev = [complex(e) for e in self.eigenvalues]
        return {
            "integrated": self.integrated,
            "eigenvalues": [e.real if e.imag == 0 else [e.real, e.imag] for e in ev],
            "spectral_radius": self.spectral_radius,
            "stable": self.stable,
            "fixed_point": self.fixed_point,
        }


def check_stability(model: BivariateModel, q: int | None = None) -> StabilityReport:
    """Eigenvalues of the feedback matrix of average intra-day/overnight variances.

    Each integrated kernel is summed over the lags its regressor term uses.
    The fixed point neglects cross-correlation terms.
    """
    q = model.q if q is None else q
    kd = integrated_kernels(model.day, q)
    kn = integrated_kernels(model.night, q)
    integ = {
        "K_DD_day": kd["K_DD"],
        "K_NN_day": kd["K_NN"],
        "K_DD_night": kn["K_DD"],
        "K_NN_night": kn["K_NN"],
    }
    a, b, c, d = integ["K_DD_day"], integ["K_NN_day"], integ["K_DD_night"], integ["K_NN_night"]
    l1, l2 = eigenvalues_2x2(a, b, c, d)
    radius = float(max(abs(l1), abs(l2)))
    stable = radius < 1.0
    fixed = None
    if stable:
        A = np.array([[1.0 - a, -b], [-c, 1.0 - d]])
        x = np.linalg.solve(A, [model.day.s2, model.night.s2])
        fixed = (float(x[0]), float(x[1]))
    ev = tuple(float(np.real(v)) if np.imag(v) == 0 else complex(v) for v in (l1, l2))
    return StabilityReport(integ, ev, radius, stable, fixed)


# ---------------------------------------------------------------------------
# kernel pieces of the quadratic form


@dataclass
class Chain:
    """Quadratic form sum_i C_i c_i^2 + sum_k Nb_k n_k^2 + 2 a_i c_i n_i + 2 b_i c_i n_{i-1}.

    Centers ``c_1..c_q`` with diagonal ``C``; neighbours ``n_0..n_q`` with
    diagonal ``Nb``; ``a`` couples center i to neighbour i and ``b`` to
    neighbour i-1.
    """

    C: np.ndarray
    Nb: np.ndarray
    a: np.ndarray
    b: np.ndarray


def _values(params: Params, q: int) -> dict[str, np.ndarray]:
    return {t.kernel: params.kernel(t.kernel).values(t.n) for t in layout(params.equation, q)}


def chain_of(params: Params, q: int) -> Chain:
    v = _values(params, q)
    if params.equation == DAY:
        # N_0 - D_1 - N_1 - ... - D_q - N_q with DN(tau) linking D_tau to N_(tau-1)
        return Chain(C=v["K_DD"], Nb=v["K_NN"], a=v["K_ND"], b=v["K_DN"])
    if params.equation == NIGHT:
        # path D_1 - N_1 - D_2 - ... - N_q read backwards, overnight nodes as centers
        dn = v["K_DN"]
        return Chain(
            C=v["K_NN"][::-1],
            Nb=np.concatenate([[0.0], v["K_DD"][::-1]]),
            a=v["K_ND"][::-1],
            b=np.concatenate([[0.0], dn[::-1]]),
        )
    raise ValueError("chain criterion applies to day/night equations")


# ---------------------------------------------------------------------------
# criterion: single cross kernel


@dataclass
class SingleCriterion:
    per_tau: np.ndarray
    margin: np.ndarray
    passed: bool
    applicable: bool
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "applicable": self.applicable,
            "failing_lags": (np.flatnonzero(~self.per_tau) + 1).tolist(),
            "min_margin": float(np.min(self.margin)) if self.margin.size else None,
            "message": self.message,
        }


def _as_values(k, q: int) -> np.ndarray:
    return k.values(q) if isinstance(k, KernelSpec) else np.asarray(k, dtype=float)[:q]


def check_positivity_single(K_DD, K_NN, K_ND, q: int | None = None, unpaired=()) -> SingleCriterion:
    """``K_ND(tau)^2 <= K_DD(tau) K_NN(tau)`` for every lag.

    Necessary and sufficient for the block matrix coupling D_tau with N_tau
    only, provided the diagonal kernels are non-negative. ``unpaired`` holds
    diagonal coefficients of regressors no cross kernel touches (the
    same-day overnight return in the intra-day equation); they must be
    non-negative too. Accepts kernels or coefficient arrays.
    """
    if q is None:
        q = len(K_DD) if not isinstance(K_DD, KernelSpec) else None
        if q is None:
            raise ValueError("q is required for parametric kernels")
    dd, nn, nd = (_as_values(k, q) for k in (K_DD, K_NN, K_ND))
    margin = dd * nn - nd * nd
    per_tau = margin >= 0
    if np.any(dd < 0) or np.any(nn < 0):
        return SingleCriterion(per_tau, margin, False, False, "negative diagonal coefficient")
    if np.any(np.asarray(unpaired, dtype=float) < 0):
        return SingleCriterion(per_tau, margin, False, True, "negative unpaired diagonal coefficient")
    return SingleCriterion(per_tau, margin, bool(per_tau.all()), True)


# ---------------------------------------------------------------------------
# criterion: two cross kernels


def chain_margin(chain: Chain, beta: float) -> np.ndarray:
    """M(beta, i) for every center; the chain is covered at beta iff min >= 1."""
    C, Nb, a, b = chain.C, chain.Nb, chain.a, chain.b
    with np.errstate(divide="ignore", invalid="ignore"):
        den_a = beta * C * Nb[1:]
        den_b = (1.0 - beta) * C * Nb[:-1]
        # A, B: shares of the two cross terms; the lag is covered iff A + B <= 1
        A = np.where(a == 0, 0.0, np.where(den_a > 0, a * a / den_a, np.inf))
        B = np.where(b == 0, 0.0, np.where(den_b > 0, b * b / den_b, np.inf))
        M = np.maximum((1.0 - B) / A, (1.0 - A) / B)
        M = np.where(A == 0, 1.0 / B, M)
        M = np.where(B == 0, 1.0 / A, M)
    return np.where(np.isnan(M), -np.inf, M)


@dataclass
class DoubleCriterion:
    sup_min: float
    beta: float
    passed: bool
    applicable: bool
    min_eigenvalue: float | None
    message: str = ""

    def to_dict(self) -> dict:
        return dict(vars(self))


def sup_min_margin(chain: Chain, n_grid: int = 1000, tol: float = 1e-6) -> tuple[float, float]:
    """max over beta in (0,1) of min_i M(beta, i): grid search, then golden section."""
    grid = (np.arange(n_grid) + 0.5) / n_grid
    vals = np.array([chain_margin(chain, b).min() for b in grid])
    k = int(np.argmax(vals))
    best_beta, best = float(grid[k]), float(vals[k])
    if np.isfinite(best):
        lo = max(grid[k] - 1.0 / n_grid, 1e-12)
        hi = min(grid[k] + 1.0 / n_grid, 1 - 1e-12)
        res = minimize_scalar(
            lambda b: -chain_margin(chain, b).min(), bounds=(lo, hi), method="bounded", options={"xatol": tol}
        )
        if -res.fun > best:
            best_beta, best = float(res.x), float(-res.fun)
    return best, best_beta


def min_eigenvalue(params: Params, q: int) -> float:
    K, _ = build_quadratic_matrix(params, q)
    return float(np.linalg.eigvalsh(K)[0])


def check_positivity_double(params: Params, q: int, exact: bool = True) -> DoubleCriterion:
    """Sufficient lag-by-lag criterion for the two-cross-kernel quadratic form.

    Passes iff ``sup_beta min_tau M(beta, tau) >= 1``. With ``exact`` the
    smallest eigenvalue of the assembled matrix is reported as ground truth.
    """
    if params.equation == DAILY:
        k = params.K.values(q)
        ok = bool(np.all(k >= 0))
        return DoubleCriterion(np.inf if ok else -np.inf, np.nan, ok, True, float(k.min()) if exact else None)
    chain = chain_of(params, q)
    lam = min_eigenvalue(params, q) if exact else None
    if np.any(chain.C < 0) or np.any(chain.Nb < 0):
        return DoubleCriterion(-np.inf, np.nan, False, False, lam, "negative diagonal coefficient")
    best, beta = sup_min_margin(chain)
    return DoubleCriterion(best, beta, bool(best >= 1.0), True, lam)


# ---------------------------------------------------------------------------
# criterion: leverage


@dataclass
class LeverageCriterion:
    value: float
    bound: float
    passed: bool
    applicable: bool
    message: str = ""

    def to_dict(self) -> dict:
        return dict(vars(self))


def check_positivity_leverage(params: Params, q: int, s2: float | None = None) -> LeverageCriterion:
    """``L' K^-1 L <= 4 s2`` via a Cholesky solve; inapplicable unless K is positive-definite."""
    s2 = params.s2 if s2 is None else s2
    K, L = build_quadratic_matrix(params, q)
    bound = 4.0 * s2
    if not np.any(L):
        return LeverageCriterion(0.0, bound, bool(s2 >= 0), True)
    try:
        factor = cho_factor(K, lower=True)
    except LinAlgError:
        return LeverageCriterion(np.nan, bound, False, False, "quadratic matrix is not positive-definite")
    value = float(L @ cho_solve(factor, L))
    return LeverageCriterion(value, bound, bool(value <= bound), True)


def bordered_is_psd(params: Params, q: int, s2: float | None = None, tol: float = 0.0) -> bool:
    """Eigenvalue test of [[K, L/2], [L'/2, s2]] (ground truth for the leverage criterion)."""
    K, L = build_quadratic_matrix(params, q)
    n = K.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = K
    M[:n, n] = M[n, :n] = 0.5 * L
    M[n, n] = params.s2 if s2 is None else s2
    return bool(np.linalg.eigvalsh(M)[0] >= -tol)


# ---------------------------------------------------------------------------
# adjustments used when checking at a shorter lag


def rebaseline_s2(params: Params, q_fit: int, q_new: int, m_D: float = 1.0, m_N: float = 1.0) -> float:
    """Baseline at lag ``q_new`` keeping the average variance of the ``q_fit`` model.

    Truncating the kernels removes their tail contribution to the average
    variance; that mass is moved into the baseline (second moments ``m_D``,
    ``m_N`` default to the normalized value 1).
    """
    if params.equation == DAILY:
        moments = {"K": m_D + m_N}
    else:
        moments = {"K_DD": m_D, "K_NN": m_N}
    full = integrated_kernels(params, q_fit)
    short = integrated_kernels(params, q_new)
    return float(params.s2 + sum(m * (full[k] - short[k]) for k, m in moments.items()))


CROSS_KERNELS = ("K_ND", "K_DN")


def ill_determined_omegas(params: Params, stderr: dict, scope: str = "cross") -> list[str]:
    """Kernels whose 95% interval for omega reaches below zero."""
    names = CROSS_KERNELS if scope == "cross" else tuple(
        k for k in params.kernel_names if params.kernel(k).shape != FREE
    )
    out = []
    for k in names:
        spec = params.kernel(k)
        se = (stderr.get(k) or {}).get("omega")
        if spec.shape == FREE or se is None:
            continue
        if spec.omega - Z_95 * se < 0:
            out.append(k)
    return out


def with_omega_upper_bounds(params: Params, stderr: dict, scope: str = "cross") -> tuple[Params, list[str]]:
    """Replace ill-determined decay rates by the upper end of their 95% interval.

    ``scope="cross"`` restricts the replacement to the cross kernels;
    ``scope="all"`` applies it to every parametric kernel.
    """
    changed = ill_determined_omegas(params, stderr, scope)
    changes = {}
    for k in changed:
        spec = params.kernel(k)
        changes[k] = spec.with_params(
            [spec.omega + Z_95 * stderr[k]["omega"] if p == "omega" else getattr(spec, p) for p in spec.param_names]
        )
    return params.replace(**changes), changed


# ---------------------------------------------------------------------------
# combined report


@dataclass
class PositivityReport:
    q: int
    s2_used: float
    criterion_single: SingleCriterion
    criterion_double: DoubleCriterion
    criterion_leverage: LeverageCriterion
    overall: bool
    adjusted_omegas: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "s2_used": self.s2_used,
            "criterion_single": self.criterion_single.to_dict(),
            "criterion_double": self.criterion_double.to_dict(),
            "criterion_leverage": self.criterion_leverage.to_dict(),
            "overall": self.overall,
            "adjusted_omegas": self.adjusted_omegas,
        }


def check_positivity(
    params: Params,
    q: int,
    q_fit: int | None = None,
    stderr: dict | None = None,
    omega_upper_bound: bool = False,
    omega_scope: str = "cross",
    exact: bool = True,
) -> PositivityReport:
    """All positivity criteria for one equation at maximum lag ``q``.

    When ``q_fit`` (the lag the parameters were estimated with) exceeds
    ``q``, the baseline is re-based with :func:`rebaseline_s2`. With
    ``omega_upper_bound`` ill-determined decay rates are replaced using
    ``stderr``. The overall verdict passes only when the sufficient criteria
    pass.
    """
    adjusted: list[str] = []
    if omega_upper_bound:
        if stderr is None:
            raise ValueError("omega upper bounds need standard errors")
        params, adjusted = with_omega_upper_bounds(params, stderr, omega_scope)
    s2 = params.s2
    if q_fit is not None and q_fit > q:
        s2 = rebaseline_s2(params, q_fit, q)
    if params.equation == DAILY:
        k = params.K.values(q)
        single = SingleCriterion(k >= 0, k, bool(np.all(k >= 0)), True)
    else:
        v = _values(params, q)
        if params.equation == DAY:
            single = check_positivity_single(v["K_DD"], v["K_NN"][1:], v["K_ND"], q, unpaired=v["K_NN"][:1])
        else:
            single = check_positivity_single(v["K_DD"], v["K_NN"], v["K_ND"], q)
    double = check_positivity_double(params, q, exact=exact)
    lev = check_positivity_leverage(params, q, s2)
    overall = double.passed and lev.passed and lev.applicable
    return PositivityReport(q, s2, single, double, lev, overall, adjusted)


# ---------------------------------------------------------------------------
# simulation check


@dataclass
class EmpiricalPositivity:
    stock_days: int
    n_negative: int
    min_variance: float

    def to_dict(self) -> dict:
        return dict(vars(self))


def empirical_positivity(
    model: BivariateModel,
    stock_days: int = 1_000_000,
    seed: int = 0,
    n_stocks: int = 100,
    burn_in: int | None = None,
) -> EmpiricalPositivity:
    """Count negative instantaneous variances over a long simulation.

    ``stock_days`` counts simulated (stock, date) pairs after burn-in; both
    the intra-day and overnight variances are checked.
    """
    from .simulate import SimConfig, simulate_panel

    horizon = int(np.ceil(stock_days / n_stocks))
    cfg = SimConfig(n_stocks, horizon, seed, model, burn_in=burn_in, on_negative="count")
    sim = simulate_panel(cfg, force=True, return_diagnostics=True)
    diag = sim.diagnostics
    return EmpiricalPositivity(n_stocks * horizon, diag.n_negative, diag.min_variance)
