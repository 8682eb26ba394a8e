"""Maximum-likelihood calibration of one volatility equation.

The pipeline has three steps plus an optional fourth for the night equation:

1. :func:`moment_init` - least-squares regression of squared returns on the
   lagged regressors, giving free (tabulated) kernels to start from;
2. :func:`mle_free` - Newton ascent on all tabulated coefficients at a short
   maximum lag;
3. :func:`fit_functional_forms` + :func:`mle_parametric` - power-law and
   exponential shapes fitted to the free kernels, then refined by MLE at the
   long maximum lag with the Student degrees of freedom included;
4. :func:`mle_night_constrained` - zero-baseline night fit where the
   diagonal amplitudes are tied by the average-variance identity.

Standard errors come from the inverse of the observed information matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear, minimize_scalar

from .kernels import EXPONENTIAL, FREE, POWERLAW_EXP, KernelSpec, h_sum
from .likelihood import Likelihood, LikelihoodReport, PanelData, student_derivs, student_loglik
from .model import DAILY, DAY, NIGHT, DailyArchParams, EquationParams, Params, layout
from .optimize import maximize
from .parametrization import NU_BOUNDS, ConstrainedNightMap, StandardMap
from .validity import Z_95

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# results


@dataclass
class FitResult:
    """Outcome of one likelihood maximization.

    ``hessian`` is the Hessian of the mean log-likelihood per point in the
    optimizer's parameter coordinates (``names``); ``stderr`` maps parameter
    names to asymptotic standard errors, including derived amplitudes for
    the zero-baseline night fit. ``constants`` holds the fixed quantities of
    that fit (cross contribution ``c`` and moments ``m_D``, ``m_N``).
    """

    params: Params
    names: list[str]
    theta: np.ndarray
    stderr: dict[str, float]
    hessian: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    report: LikelihoodReport
    q: int
    history: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    kind: str = "parametric"
    constants: dict[str, float] = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.report.n_points

    @property
    def covariance(self) -> np.ndarray:
        """Asymptotic covariance of ``theta``: (n * -H)^-1."""
        return _inverse_information(self.hessian, self.n_points)[0]

    @property
    def confidence_intervals(self) -> dict[str, float]:
        return {k: Z_95 * v for k, v in self.stderr.items()}

    def kernel_stderr(self) -> dict:
        """Standard errors nested by kernel, e.g. ``{"K_DD": {"g": ..}, "nu": ..}``."""
        return nest_stderr(self.params, self.stderr)

    def weakly_identified(self) -> list[str]:
        """Power-law kernels with alpha > 1 whose decay-rate interval contains 0."""
        out = []
        nested = self.kernel_stderr()
        for k in self.params.kernel_names:
            spec = self.params.kernel(k)
            se = nested.get(k, {}).get("omega")
            if spec.shape == POWERLAW_EXP and se is not None and spec.alpha > 1 and spec.omega - Z_95 * se < 0:
                out.append(k)
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "q": self.q,
            "params": self.params.to_dict(),
            "names": list(self.names),
            "theta": self.theta.tolist(),
            "stderr": self.stderr,
            "stderr_by_kernel": self.kernel_stderr(),
            "hessian": self.hessian.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "likelihood": self.report.to_dict(),
            "history": self.history,
            "flags": self.flags,
            "weakly_identified": self.weakly_identified(),
            "constants": self.constants,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        from .model import params_from_dict

        rep = d["likelihood"]
        return cls(
            params=params_from_dict(d["params"]),
            names=list(d["names"]),
            theta=np.array(d["theta"], dtype=float),
            stderr={k: float(v) for k, v in d["stderr"].items()},
            hessian=np.array(d["hessian"], dtype=float),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            final_gradient_norm=float(d["final_gradient_norm"]),
            report=LikelihoodReport(
                float(rep["loglik_per_point"]),
                float(rep["loglik_without_constant"]),
                int(rep["n_points"]),
                int(rep["negative_variance_count"]),
            ),
            q=int(d["q"]),
            history=list(d.get("history", [])),
            flags=list(d.get("flags", [])),
            kind=d.get("kind", "parametric"),
            constants={k: float(v) for k, v in d.get("constants", {}).items()},
        )


def _inverse_information(hessian: np.ndarray, n: int) -> tuple[np.ndarray, bool]:
    info = -np.asarray(hessian) * n
    try:
        np.linalg.cholesky(info)
        return np.linalg.inv(info), True
    except np.linalg.LinAlgError:
        return np.linalg.pinv(info), False


def _short(name: str) -> tuple[str, str]:
    """Parameter name -> (kernel, parameter); e.g. 'alpha_NN_D' -> ('K_NN', 'alpha')."""
    table = {"DD": "K_DD", "NN": "K_NN", "ND": "K_ND", "DN": "K_DN", "LD": "L_D", "LN": "L_N", "K": "K", "L": "L"}
    parts = name.split("_")
    if parts[0] in ("s2", "nu", "gamma"):
        return parts[0], ""
    return table.get(parts[1], parts[1]), parts[0]


def nest_stderr(params: Params, stderr: dict[str, float]) -> dict:
    out: dict = {}
    for name, se in stderr.items():
        kernel, p = _short(name)
        if p == "":
            out[kernel] = se
        elif not p.startswith("c"):
            out.setdefault(kernel, {})[p] = se
    return out


def _finish(lik: Likelihood, pmap, res, q: int, kind: str, flags=None, extra_se=None) -> FitResult:
    cov, ok = _inverse_information(res.hessian, lik.data.n_points)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    stderr = dict(zip(pmap.names, map(float, se)))
    flags = list(flags or [])
    if not ok:
        flags.append("hessian not negative-definite at the optimum")
    if not res.converged:
        flags.append(f"not converged: {res.message}")
    nu_index = getattr(pmap, "nu_index", None)
    if nu_index is not None and res.theta[nu_index] > 0.999 * NU_BOUNDS[1]:
        flags.append(f"nu at its upper bound ({NU_BOUNDS[1]:g}): residuals are effectively Gaussian")
    if extra_se:
        stderr.update(extra_se(cov))
    return FitResult(
        params=pmap.to_params(res.theta),
        names=list(pmap.names),
        theta=res.theta,
        stderr=stderr,
        hessian=res.hessian,
        converged=res.converged,
        iterations=res.iterations,
        final_gradient_norm=res.gradient_norm,
        report=lik.report(res.theta),
        q=q,
        history=res.history,
        flags=flags,
        kind=kind,
    )


def _data(returns, target: str, q: int) -> PanelData:
    if isinstance(returns, PanelData):
        if returns.target != target or returns.q != q:
            raise ValueError("prepared panel does not match target/q")
        return returns
    return PanelData(returns, target, q)


def fit_map(data: PanelData, pmap, q: int, kind: str, max_iter: int = 500, gtol: float = 1e-6, **kw) -> FitResult:
    """Maximize the likelihood over the parameters exposed by ``pmap``."""
    lik = Likelihood(data, pmap)
    upper = pmap.upper_bounds() if hasattr(pmap, "upper_bounds") else None
    res = maximize(
        lik.value, lik.value_grad_hess, pmap.initial(), pmap.lower_bounds(), gtol=gtol, max_iter=max_iter, upper=upper
    )
    return _finish(lik, pmap, res, q, kind, **kw)


# ---------------------------------------------------------------------------
# degrees of freedom


@dataclass
class NuEstimate:
    nu: float
    stderr: float
    at_boundary: bool
    n: int


def estimate_nu(residuals, bounds: tuple[float, float] = NU_BOUNDS) -> NuEstimate:
    """One-dimensional MLE of the unit-variance Student degrees of freedom.

    ``residuals`` are returns divided by their predicted volatility.
    """
    x = np.asarray(residuals, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise ValueError("no residuals")
    ones = np.ones_like(x)
    lo, hi = bounds

    def negll(log_a):
        return -float(np.mean(student_loglik(ones, x, 2.0 + np.exp(log_a))))

    res = minimize_scalar(negll, bounds=(np.log(lo - 2.0), np.log(hi - 2.0)), method="bounded", options={"xatol": 1e-8})
    nu = 2.0 + float(np.exp(res.x))
    f_nn = float(np.mean(student_derivs(ones, x, nu).f_nn))
    se = float(1.0 / np.sqrt(-f_nn * x.size)) if f_nn < 0 else np.inf
    at_boundary = nu < lo + 1e-3 or nu > hi * (1 - 1e-3)
    return NuEstimate(nu, se, at_boundary, x.size)


# ---------------------------------------------------------------------------
# step 1: moment initialization


@dataclass
class InitResult:
    params: Params
    stderr: dict[str, float]
    fallback: bool
    flags: list[str] = field(default_factory=list)


def _free_template(equation: str, q: int, coef=None, s2: float = 1.0, nu: float = 10.0) -> Params:
    lengths = {t.kernel: t.n for t in layout(equation, q)}
    if equation == DAILY:
        kernels = {k: KernelSpec.free(np.zeros(q)) for k in ("K", "L")}
        p = DailyArchParams(s2=s2, nu=nu, **kernels)
    else:
        # every tabulated kernel is long enough for its longest term
        kernels = {k: KernelSpec.free(np.zeros(lengths[k])) for k in lengths}
        p = EquationParams(equation, s2, nu=nu, **kernels)
    if coef:
        p = p.replace(**{k: KernelSpec.free(v) for k, v in coef.items()})
    return p


def fallback_init(returns, target: str, q: int) -> Params:
    """Safe starting point: diagonal kernels ~ 1/tau carrying half the variance."""
    data = _data(returns, target, q)
    m2 = float(np.mean(data.y[data.mask] ** 2))
    lengths = {t.kernel: t.n for t in layout(target, q)}
    diag = ("K",) if target == DAILY else ("K_DD", "K_NN")
    share = 0.5 / len(diag)
    coef = {}
    for k in diag:
        n = lengths[k]
        tau = np.arange(1, n + 1, dtype=float)
        coef[k] = share * (1.0 / tau) / np.sum(1.0 / tau)
    return _free_template(target, q, coef, s2=0.5 * m2, nu=10.0)


def moment_init(returns, q: int, target: str, min_points_per_lag: int = 100) -> InitResult:
    """Free kernels from an OLS regression of squared returns on the lagged regressors.

    The conditional variance is linear in all kernel coefficients and the
    baseline, so ``E[r_t^2 | past] = sigma_t^2`` gives a linear regression on
    exactly the regressors the likelihood uses. Standard errors are
    heteroskedasticity-robust (HC0). Falls back to :func:`fallback_init` when
    the panel is too small (fewer than ``min_points_per_lag * q`` points),
    the design is singular, or no shrinkage of the OLS solution toward the
    fallback gives positive variances everywhere.
    """
    data = _data(returns, target, q)
    template = _free_template(target, q)
    pmap = StandardMap(template, s2=True, nu=False)
    lik = Likelihood(data, pmap)
    fb = fallback_init(data, target, q)
    flags: list[str] = []

    def with_nu(params):
        v = Likelihood(data, StandardMap(params, kernels=(), s2=False, nu=False)).variance(np.zeros(0))
        v = v[data.mask]
        ok = v > 0
        est = estimate_nu(data.y[data.mask][ok] / np.sqrt(v[ok]))
        return params.replace(nu=min(max(est.nu, 2.5), 100.0))

    if data.n_points < min_points_per_lag * q:
        flags.append(f"fallback: {data.n_points} points < {min_points_per_lag} x q")
        return InitResult(with_nu(fb), {}, True, flags)

    P = pmap.size
    theta0 = pmap.initial()
    gram = np.zeros((P, P))
    rhs = np.zeros(P)
    for Z, y in _iter_design(lik, theta0):
        gram += Z.T @ Z
        rhs += Z.T @ (y * y)
    try:
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned design")
        beta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        flags.append(f"fallback: {exc}")
        return InitResult(with_nu(fb), {}, True, flags)

    meat = np.zeros((P, P))
    for Z, y in _iter_design(lik, theta0):
        e = y * y - Z @ beta
        Ze = Z * e[:, None]
        meat += Ze.T @ Ze
    ginv = np.linalg.inv(gram)
    se = np.sqrt(np.maximum(np.diag(ginv @ meat @ ginv), 0.0))
    stderr = dict(zip(pmap.names, map(float, se)))

    theta_fb = StandardMap(fb, s2=True, nu=False).initial()
    lam = 1.0
    for _ in range(12):
        cand = lam * beta + (1.0 - lam) * theta_fb
        if np.all(lik.variance(cand)[data.mask] > 0):
            if lam < 1.0:
                flags.append(f"regression shrunk toward fallback (weight {lam:g})")
            return InitResult(with_nu(pmap.to_params(cand)), stderr, False, flags)
        lam *= 0.5
    flags.append("fallback: regression implies negative variances")
    return InitResult(with_nu(fb), stderr, True, flags)


def _iter_design(lik: Likelihood, theta: np.ndarray):
    d = lik.data
    P = lik.pmap.size
    step = max(1, 4_000_000 // max(1, d.n_dates * P))
    for start in range(0, d.n_stocks, step):
        rows = slice(start, min(start + step, d.n_stocks))
        Z = lik._design_chunk(theta, rows, {}).reshape(-1, P)
        m = d.mask[rows].ravel()
        yield Z[m], d.y[rows].ravel()[m]


# ---------------------------------------------------------------------------
# step 2: free kernels


def mle_free(returns, target: str, q_free: int = 63, init: Params | None = None, max_iter: int = 500) -> FitResult:
    """MLE of all tabulated kernel coefficients, the baseline and ``nu``."""
    data = _data(returns, target, q_free)
    flags: list[str] = []
    if init is None:
        ir = moment_init(data, q_free, target)
        init, flags = ir.params, list(ir.flags)
    for k in init.kernel_names:
        if init.kernel(k).shape != FREE:
            raise ValueError("mle_free needs tabulated kernels; see moment_init")
    pmap = StandardMap(init, s2=True, nu=True)
    return fit_map(data, pmap, q_free, "free", max_iter=max_iter, flags=flags)


# ---------------------------------------------------------------------------
# step 3: functional forms


DEFAULT_ALPHA = 1.0
DEFAULT_OMEGA = 1.0 / 50.0
# shape parameters start this far inside their zero bound so the
# log-transformed optimizer can move them either way
MIN_START = 1e-3


@dataclass
class FormFit:
    kernel: KernelSpec
    fallback: bool
    n_points: int


def _weighted_lsq(A: np.ndarray, b: np.ndarray, w: np.ndarray, lower: np.ndarray) -> np.ndarray:
    sw = np.sqrt(w)
    res = lsq_linear(A * sw[:, None], b * sw, bounds=(lower, np.full(A.shape[1], np.inf)), method="bvls", tol=1e-14)
    return res.x


def fit_powerlaw(values, stderr=None, diagonal: bool = False) -> FormFit:
    """Fit ``g tau^-alpha e^(-omega tau)`` to tabulated coefficients.

    Least squares of ``ln K`` on ``(1, -ln tau, -tau)`` over lags with a
    positive coefficient, weighted by ``(K / se)^2`` when standard errors are
    given, with ``alpha, omega >= 0``. With fewer than 3 usable lags the
    default shape ``alpha = 1, omega = 1/50`` is used with the amplitude
    matching the kernel's sum (kept positive for diagonal kernels).
    """
    k = np.asarray(values, dtype=float)
    tau = np.arange(1, k.size + 1, dtype=float)
    use = k > 0
    if stderr is not None:
        se = np.asarray(stderr, dtype=float)
        use &= se > 0
    if use.sum() < 3:
        g = float(np.sum(k) / h_sum(DEFAULT_ALPHA, DEFAULT_OMEGA, k.size))
        if diagonal and g <= 0:
            g = 1e-4
        return FormFit(KernelSpec.powerlaw(g, DEFAULT_ALPHA, DEFAULT_OMEGA), True, int(use.sum()))
    A = np.column_stack([np.ones(use.sum()), -np.log(tau[use]), -tau[use]])
    b = np.log(k[use])
    w = (k[use] / se[use]) ** 2 if stderr is not None else np.ones(use.sum())
    x = _weighted_lsq(A, b, w / w.max(), np.array([-np.inf, 0.0, 0.0]))
    alpha, omega = max(float(x[1]), MIN_START), max(float(x[2]), MIN_START)
    return FormFit(KernelSpec.powerlaw(float(np.exp(x[0])), alpha, omega), False, int(use.sum()))


def fit_exponential(values, stderr=None) -> FormFit:
    """Fit ``g e^(-omega tau)`` in lin-log space on lags sharing the kernel's overall sign."""
    k = np.asarray(values, dtype=float)
    tau = np.arange(1, k.size + 1, dtype=float)
    sign = 1.0 if np.sum(k) >= 0 else -1.0
    use = sign * k > 0
    if stderr is not None:
        se = np.asarray(stderr, dtype=float)
        use &= se > 0
    if use.sum() < 3:
        g = float(np.sum(k) / np.sum(np.exp(-DEFAULT_OMEGA * tau)))
        return FormFit(KernelSpec.exponential(g, DEFAULT_OMEGA), True, int(use.sum()))
    A = np.column_stack([np.ones(use.sum()), -tau[use]])
    b = np.log(sign * k[use])
    w = (k[use] / se[use]) ** 2 if stderr is not None else np.ones(use.sum())
    x = _weighted_lsq(A, b, w / w.max(), np.array([-np.inf, 0.0]))
    return FormFit(KernelSpec.exponential(sign * float(np.exp(x[0])), max(float(x[1]), MIN_START)), False, int(use.sum()))


def _coef_stderr(stderr: dict | None, params: Params, kernel: str, n: int):
    if not stderr:
        return None
    from .parametrization import _EQ_SUFFIX, _SHORT

    names = [f"c{t}_{_SHORT[kernel]}{_EQ_SUFFIX[params.equation]}" for t in range(1, n + 1)]
    if not all(nm in stderr for nm in names):
        return None
    return np.array([stderr[nm] for nm in names])


def fit_functional_forms(free: Params | FitResult, stderr: dict | None = None) -> tuple[Params, list[str]]:
    """Parametric starting point from tabulated kernels.

    Quadratic kernels get the truncated power law, leverage kernels the
    exponential. Returns the parametric parameter set and a list of flags
    for kernels that fell back to the default shape or are insignificant.
    """
    if isinstance(free, FitResult):
        stderr = free.stderr if stderr is None else stderr
        free = free.params
    flags = []
    changes = {}
    for name in free.kernel_names:
        spec = free.kernel(name)
        if spec.shape != FREE:
            changes[name] = spec
            continue
        vals = spec.coefficients
        se = _coef_stderr(stderr, free, name, vals.size)
        if se is not None and np.all(np.abs(vals) < 2 * se):
            flags.append(f"{name}: all free coefficients insignificant")
        if name.startswith("L"):
            ff = fit_exponential(vals, se)
        else:
            ff = fit_powerlaw(vals, se, diagonal=name in ("K_DD", "K_NN", "K"))
        if ff.fallback:
            flags.append(f"{name}: fewer than 3 usable lags, default shape used")
        changes[name] = ff.kernel
    return free.replace(**changes), flags


# ---------------------------------------------------------------------------
# step 3: parametric MLE


def mle_parametric(
    returns,
    target: str,
    q: int = 512,
    init: Params | None = None,
    include_nu: bool = True,
    kernels=None,
    max_iter: int = 500,
    flags=None,
) -> FitResult:
    """MLE of the kernel shape parameters, the baseline and (optionally) ``nu``."""
    if init is None:
        raise ValueError("mle_parametric needs a parametric starting point")
    for k in init.kernel_names:
        if init.kernel(k).shape == FREE:
            raise ValueError(f"kernel {k} is tabulated; run fit_functional_forms first")
    data = _data(returns, target, q)
    pmap = StandardMap(init, kernels=kernels, s2=True, nu=include_nu)
    return fit_map(data, pmap, q, "parametric", max_iter=max_iter, flags=flags)


# ---------------------------------------------------------------------------
# step 4: zero-baseline night fit


def cross_contribution(params: Params, returns, q: int) -> float:
    """Average contribution of the cross kernels to the night variance.

    ``sum K_ND * <2 rD rN> + sum K_DN * <2 rD_(t-1) rN_t>``, with the pooled
    cross moments measured on the valid points of ``returns``.
    """
    data = _data(returns, NIGHT, q)
    total = 0.0
    for term in layout(NIGHT, q):
        if term.kernel in ("K_ND", "K_DN"):
            mean = float(np.mean(data.series[term.series][data.mask]))
            total += float(params.kernel(term.kernel).values(term.n).sum()) * mean
    return total


def mle_night_constrained(
    returns,
    init: Params | FitResult,
    q: int = 512,
    unit_moments: bool = True,
    c: float | None = None,
    max_iter: int = 500,
) -> FitResult:
    """Night fit with zero baseline, optimizing (gamma, alpha1, omega1, alpha2, omega2).

    All kernels except ``K_DD`` and ``K_NN`` and ``nu`` are frozen at
    ``init``. With ``unit_moments`` the second moments of both return types
    are taken as 1 (normalized panels); otherwise the pooled moments of
    ``returns`` are used.
    """
    if isinstance(init, FitResult):
        init = init.params
    if init.equation != NIGHT:
        raise ValueError("constrained fit applies to the night equation")
    data = _data(returns, NIGHT, q)
    if c is None:
        c = cross_contribution(init, data, q)
    m_D = m_N = 1.0
    if not unit_moments:
        m_D = float(np.mean(data.series["rD2"][data.mask]))
        m_N = float(np.mean(data.series["rN2"][data.mask]))
    if c >= m_N:
        raise ValueError(f"cross-kernel contribution c = {c:.4g} leaves no room for feedback")
    template = init.replace(s2=0.0)
    pmap = ConstrainedNightMap(template, q, c=c, m_D=m_D, m_N=m_N)

    def derived(cov):
        th = res_holder["theta"]
        duals = pmap._duals(th)
        dg = np.asarray(duals["g"].g).reshape(-1, 5)[0]
        g = float(np.ravel(duals["g"].v)[0])
        gamma = th[0]
        d_nn = gamma * dg + g * np.eye(5)[0]
        return {
            "g_DD_N": float(np.sqrt(max(dg @ cov @ dg, 0.0))),
            "g_NN_N": float(np.sqrt(max(d_nn @ cov @ d_nn, 0.0))),
        }

    lik = Likelihood(data, pmap)
    res = maximize(lik.value, lik.value_grad_hess, pmap.initial(), pmap.lower_bounds(), max_iter=max_iter)
    res_holder = {"theta": res.theta}
    fit = _finish(lik, pmap, res, q, "constrained", extra_se=derived)
    fit.constants = {"c": float(c), "m_D": m_D, "m_N": m_N}
    return fit


def constraint_identity(params: Params, q: int, c: float, m_D: float = 1.0, m_N: float = 1.0) -> float:
    """``m_N - (m_D sum K_DD + m_N sum K_NN + c)``; zero for a zero-baseline fit."""
    v = {t.kernel: params.kernel(t.kernel).values(t.n) for t in layout(NIGHT, q)}
    return float(m_N - (m_D * v["K_DD"].sum() + m_N * v["K_NN"].sum() + c))


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class CalibrationResult:
    target: str
    init: InitResult
    free: FitResult
    forms: Params
    parametric: FitResult
    constrained: FitResult | None
    flags: list[str]

    @property
    def final(self) -> FitResult:
        return self.constrained if self.constrained is not None else self.parametric

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "final": self.final.to_dict(),
            "steps": {
                "moment_init": {"params": self.init.params.to_dict(), "fallback": self.init.fallback, "flags": self.init.flags},
                "free": self.free.to_dict(),
                "functional_forms": self.forms.to_dict(),
                "parametric": self.parametric.to_dict(),
                "constrained": None if self.constrained is None else self.constrained.to_dict(),
            },
            "flags": self.flags,
        }


def calibrate(
    returns,
    target: str,
    q_free: int = 63,
    q: int = 512,
    constrain_s2_zero: bool | None = None,
    unit_moments: bool = True,
    max_iter: int = 500,
) -> CalibrationResult:
    """Run the full calibration pipeline for ``target`` ("day", "night" or "daily").

    ``constrain_s2_zero=None`` runs the zero-baseline step only when the
    unconstrained night baseline comes out negative.
    """
    if target not in (DAY, NIGHT, DAILY):
        raise ValueError(f"unknown target {target!r}")
    log.info("moment initialization (%s, q=%d)", target, q_free)
    ir = moment_init(returns, q_free, target)
    log.info("free-kernel MLE")
    free = mle_free(returns, target, q_free, init=ir.params, max_iter=max_iter)
    forms, form_flags = fit_functional_forms(free)
    # nu at the long lag: one-dimensional fit on the residuals of the starting point
    data = PanelData(returns, target, q)
    v = Likelihood(data, StandardMap(forms, kernels=(), s2=False, nu=False)).variance(np.zeros(0))[data.mask]
    flags = list(ir.flags) + list(free.flags) + form_flags
    if np.all(v > 0):
        est = estimate_nu(data.y[data.mask] / np.sqrt(v))
        forms = forms.replace(nu=est.nu)
        if est.at_boundary:
            flags.append(f"nu estimate at boundary ({est.nu:.4g})")
    else:
        flags.append("functional-form start has negative variances; parametric step starts from shrunk feedback")
        forms = _shrink_feedback(forms, data)
    log.info("parametric MLE (q=%d)", q)
    par = mle_parametric(data, target, q, init=forms, max_iter=max_iter)
    constrained = None
    if target == NIGHT and (constrain_s2_zero or (constrain_s2_zero is None and par.params.s2 < 0)):
        log.info("zero-baseline night fit")
        constrained = mle_night_constrained(data, par, q, unit_moments=unit_moments, max_iter=max_iter)
    return CalibrationResult(target, ir, free, forms, par, constrained, flags)


def _shrink_feedback(params: Params, data: PanelData) -> Params:
    """Scale all kernel amplitudes down until the variance is positive everywhere."""
    m2 = float(np.mean(data.y[data.mask] ** 2))
    for scale in 0.5 ** np.arange(1, 20):
        changes = {}
        for k in params.kernel_names:
            spec = params.kernel(k)
            changes[k] = spec.with_params([spec.g * scale if p == "g" else getattr(spec, p) for p in spec.param_names])
        cand = params.replace(s2=max(params.s2, 0.5 * m2), **changes)
        v = Likelihood(data, StandardMap(cand, kernels=(), s2=False, nu=False)).variance(np.zeros(0))
        if np.all(v[data.mask] > 0):
            return cand
    raise FloatingPointError("no positive starting point found")
