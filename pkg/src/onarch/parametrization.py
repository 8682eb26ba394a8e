"""Maps from an optimizer vector ``theta`` to kernel values and derivatives.

A map tells the likelihood engine, for each regressor term, which entries of
``theta`` the kernel depends on, the kernel values, their Jacobian and their
Hessian. It also locates the baseline ``s2`` and the degrees of freedom
``nu`` inside ``theta`` (or supplies them as constants), and names every
entry for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import EXPONENTIAL, FREE, POWERLAW_EXP, KernelSpec
from .model import DAILY, DAY, NIGHT, Params, Term, layout

_SHORT = {"K_DD": "DD", "K_NN": "NN", "K_ND": "ND", "K_DN": "DN", "L_D": "LD", "L_N": "LN", "K": "K", "L": "L"}
_EQ_SUFFIX = {DAY: "_D", NIGHT: "_N", DAILY: ""}
DIAGONAL = ("K_DD", "K_NN", "K")

# admissible Student degrees of freedom; beyond the upper end the law is Gaussian for all practical purposes
NU_BOUNDS = (2.0 + 1e-6, 1000.0)


def param_name(param: str, kernel: str, equation: str) -> str:
    return f"{param}_{_SHORT[kernel]}{_EQ_SUFFIX[equation]}"


def s2_name(equation: str) -> str:
    return "s2" + _EQ_SUFFIX[equation]


def nu_name(equation: str) -> str:
    return "nu" + _EQ_SUFFIX[equation]


class StandardMap:
    """Every active kernel contributes its own parameters to ``theta``.

    Parameters
    ----------
    template : parameter set supplying the shapes and the values of frozen pieces
    kernels : names of kernels to optimize; ``None`` means all of them
    s2, nu : whether the baseline and the degrees of freedom are free
    q : maximum lag (used to size free-kernel blocks)
    """

    def __init__(self, template: Params, kernels=None, s2: bool = True, nu: bool = True):
        self.template = template
        self.equation = template.equation
        names = template.kernel_names if kernels is None else tuple(kernels)
        for k in names:
            if k not in template.kernel_names:
                raise ValueError(f"unknown kernel {k!r}")
        self.active = tuple(k for k in template.kernel_names if k in names)
        self.names: list[str] = []
        self.lower: list[float] = []
        self._cols: dict[str, list[int]] = {}
        self.positive: list[int] = []
        for k in self.active:
            spec = template.kernel(k)
            cols = []
            if spec.shape == FREE:
                for tau in range(1, spec.coefficients.size + 1):
                    cols.append(len(self.names))
                    self.names.append(f"c{tau}_{_SHORT[k]}{_EQ_SUFFIX[self.equation]}")
            else:
                for p in spec.param_names:
                    idx = len(self.names)
                    cols.append(idx)
                    self.names.append(param_name(p, k, self.equation))
                    if p in ("alpha", "omega") or (p == "g" and k in DIAGONAL):
                        self.positive.append(idx)
            self._cols[k] = cols
        self.s2_index = None
        if s2:
            self.s2_index = len(self.names)
            self.names.append(s2_name(self.equation))
        self.nu_index = None
        if nu:
            self.nu_index = len(self.names)
            self.names.append(nu_name(self.equation))
        self.size = len(self.names)
        self.has_curvature = any(template.kernel(k).shape != FREE for k in self.active)

    # -- layout ------------------------------------------------------------
    def columns(self, term: Term) -> list[int]:
        return self._cols.get(term.kernel, [])

    def is_free(self, term: Term) -> bool:
        return self.template.kernel(term.kernel).shape == FREE

    def lower_bounds(self) -> np.ndarray:
        """Lower bound of each entry (-inf when unbounded)."""
        lb = np.full(self.size, -np.inf)
        lb[self.positive] = 0.0
        if self.nu_index is not None:
            lb[self.nu_index] = NU_BOUNDS[0]
        return lb

    def upper_bounds(self) -> np.ndarray:
        """Upper bound of each entry (+inf when unbounded)."""
        ub = np.full(self.size, np.inf)
        if self.nu_index is not None:
            ub[self.nu_index] = NU_BOUNDS[1]
        return ub

    # -- conversions ---------------------------------------------------------
    def initial(self) -> np.ndarray:
        theta = np.zeros(self.size)
        for k in self.active:
            spec = self.template.kernel(k)
            vals = spec.coefficients if spec.shape == FREE else spec.params
            theta[self._cols[k]] = vals
        if self.s2_index is not None:
            theta[self.s2_index] = self.template.s2
        if self.nu_index is not None:
            theta[self.nu_index] = self.template.nu
        return theta

    def kernel(self, theta: np.ndarray, name: str) -> KernelSpec:
        spec = self.template.kernel(name)
        if name not in self._cols:
            return spec
        vals = theta[self._cols[name]]
        if spec.shape == FREE:
            return KernelSpec.free(vals)
        return spec.with_params(vals)

    def s2(self, theta: np.ndarray) -> float:
        return float(theta[self.s2_index]) if self.s2_index is not None else float(self.template.s2)

    def nu(self, theta: np.ndarray) -> float:
        return float(theta[self.nu_index]) if self.nu_index is not None else float(self.template.nu)

    def to_params(self, theta: np.ndarray) -> Params:
        changes = {k: self.kernel(theta, k) for k in self.active}
        changes["s2"] = self.s2(theta)
        changes["nu"] = self.nu(theta)
        return self.template.replace(**changes)

    # -- kernel values and derivatives ----------------------------------------
    def kernel_values(self, theta: np.ndarray, term: Term) -> np.ndarray:
        return self.kernel(theta, term.kernel).values(term.n)

    def kernel_jacobian(self, theta: np.ndarray, term: Term) -> np.ndarray:
        spec = self.kernel(theta, term.kernel)
        if spec.shape == FREE:
            return np.eye(term.n, spec.coefficients.size)
        return spec.jacobian(term.n)

    def kernel_hessian(self, theta: np.ndarray, term: Term):
        spec = self.kernel(theta, term.kernel)
        if spec.shape == FREE:
            return None
        return spec.hessian(term.n)


# ---------------------------------------------------------------------------
# zero-baseline night map


@dataclass
class _Dual:
    """Values with gradient and Hessian w.r.t. a small parameter vector."""

    v: np.ndarray
    g: np.ndarray
    h: np.ndarray

    def __mul__(self, other: "_Dual") -> "_Dual":
        v = self.v * other.v
        g = self.g * other.v[..., None] + other.g * self.v[..., None]
        h = (
            self.h * other.v[..., None, None]
            + other.h * self.v[..., None, None]
            + self.g[..., :, None] * other.g[..., None, :]
            + other.g[..., :, None] * self.g[..., None, :]
        )
        return _Dual(v, g, h)

    def __add__(self, other: "_Dual") -> "_Dual":
        return _Dual(self.v + other.v, self.g + other.g, self.h + other.h)

    def scale(self, c: float) -> "_Dual":
        return _Dual(c * self.v, c * self.g, c * self.h)

    def sum(self) -> "_Dual":
        return _Dual(self.v.sum(axis=0), self.g.sum(axis=0), self.h.sum(axis=0))

    def reciprocal(self) -> "_Dual":
        v = 1.0 / self.v
        g = -self.g * v[..., None] ** 2
        h = 2.0 * self.g[..., :, None] * self.g[..., None, :] * v[..., None, None] ** 3 - self.h * v[
            ..., None, None
        ] ** 2
        return _Dual(v, g, h)


def _power_basis(alpha: float, omega: float, ia: int, io: int, n: int, P: int) -> _Dual:
    tau = np.arange(1, n + 1, dtype=float)
    lt = np.log(tau)
    b = tau ** (-alpha) * np.exp(-omega * tau)
    g = np.zeros((n, P))
    g[:, ia] = -lt * b
    g[:, io] = -tau * b
    h = np.zeros((n, P, P))
    h[:, ia, ia] = lt * lt * b
    h[:, ia, io] = h[:, io, ia] = lt * tau * b
    h[:, io, io] = tau * tau * b
    return _Dual(b, g, h)


def _variable(value: float, index: int, P: int) -> _Dual:
    g = np.zeros((1, P))
    g[0, index] = 1.0
    return _Dual(np.array([value]), g, np.zeros((1, P, P)))


class ConstrainedNightMap:
    """Night equation with zero baseline.

    ``theta = (gamma, alpha1, omega1, alpha2, omega2)``; the diagonal kernels
    are ``K_DD = g tau^-alpha1 e^(-omega1 tau)`` and
    ``K_NN = gamma g tau^-alpha2 e^(-omega2 tau)`` with the amplitude ``g``
    fixed so that the unconditional overnight variance is fully explained by
    feedback::

        g = (m_N - c) / (m_D h(alpha1, omega1) + gamma m_N h(alpha2, omega2))

    where ``m_D``, ``m_N`` are the second moments of intra-day and overnight
    returns (1 for normalized panels) and ``c`` the contribution of the frozen
    cross kernels. All other kernels and ``nu`` stay at the template values.
    """

    equation = NIGHT
    names = ["gamma", "alpha_DD_N", "omega_DD_N", "alpha_NN_N", "omega_NN_N"]
    size = 5
    s2_index = None
    nu_index = None
    has_curvature = True
    positive = [0, 1, 2, 3, 4]

    def __init__(self, template: Params, q: int, c: float = 0.0, m_D: float = 1.0, m_N: float = 1.0):
        if template.equation != NIGHT:
            raise ValueError("constrained map applies to the night equation")
        for k in ("K_DD", "K_NN"):
            if template.kernel(k).shape != POWERLAW_EXP:
                raise ValueError(f"{k} must be a power-law kernel")
        if c >= m_N:
            raise ValueError(f"cross-kernel contribution c={c} leaves no room for feedback")
        self.template = template
        self.q = q
        self.c = float(c)
        self.m_D = float(m_D)
        self.m_N = float(m_N)
        self._n = {t.kernel: t.n for t in layout(NIGHT, q)}
        self._cache_key = None

    def lower_bounds(self) -> np.ndarray:
        return np.zeros(self.size)

    def columns(self, term: Term) -> list[int]:
        return list(range(5)) if term.kernel in ("K_DD", "K_NN") else []

    def is_free(self, term: Term) -> bool:
        return False

    def initial(self) -> np.ndarray:
        dd, nn = self.template.K_DD, self.template.K_NN
        gamma = nn.g / dd.g if dd.g > 0 and nn.g > 0 else 1.0
        return np.array([gamma, dd.alpha, dd.omega, nn.alpha, nn.omega])

    def s2(self, theta) -> float:
        return 0.0

    def nu(self, theta) -> float:
        return float(self.template.nu)

    def _duals(self, theta: np.ndarray):
        key = tuple(np.asarray(theta, dtype=float))
        if key == self._cache_key:
            return self._cache
        gamma, a1, w1, a2, w2 = key
        P = self.size
        b1 = _power_basis(a1, w1, 1, 2, self._n["K_DD"], P)
        b2 = _power_basis(a2, w2, 3, 4, self._n["K_NN"], P)
        gam = _variable(gamma, 0, P)
        denom = b1.sum().scale(self.m_D) + (gam * _Dual(*_unsqueeze(b2.sum()))).scale(self.m_N)
        amp = denom.reciprocal().scale(self.m_N - self.c)
        k_dd = b1 * _broadcast(amp, b1.v.size)
        k_nn = b2 * _broadcast(gam * amp, b2.v.size)
        self._cache_key, self._cache = key, {"K_DD": k_dd, "K_NN": k_nn, "g": amp}
        return self._cache

    def amplitude(self, theta: np.ndarray) -> float:
        return float(self._duals(theta)["g"].v[0])

    def kernel(self, theta: np.ndarray, name: str) -> KernelSpec:
        if name not in ("K_DD", "K_NN"):
            return self.template.kernel(name)
        gamma, a1, w1, a2, w2 = theta
        g = self.amplitude(theta)
        if name == "K_DD":
            return KernelSpec.powerlaw(g, a1, w1)
        return KernelSpec.powerlaw(gamma * g, a2, w2)

    def to_params(self, theta: np.ndarray) -> Params:
        return self.template.replace(
            K_DD=self.kernel(theta, "K_DD"), K_NN=self.kernel(theta, "K_NN"), s2=0.0
        )

    def kernel_values(self, theta, term: Term) -> np.ndarray:
        if term.kernel in ("K_DD", "K_NN"):
            return self._duals(theta)[term.kernel].v
        return self.template.kernel(term.kernel).values(term.n)

    def kernel_jacobian(self, theta, term: Term) -> np.ndarray:
        return self._duals(theta)[term.kernel].g

    def kernel_hessian(self, theta, term: Term) -> np.ndarray:
        return self._duals(theta)[term.kernel].h

    def constraint_residual(self, theta: np.ndarray) -> float:
        """m_N - (m_D sum K_DD + m_N sum K_NN + c); zero by construction."""
        d = self._duals(theta)
        return self.m_N - (self.m_D * d["K_DD"].v.sum() + self.m_N * d["K_NN"].v.sum() + self.c)


def _unsqueeze(d: _Dual):
    return d.v.reshape(1), d.g.reshape(1, -1), d.h.reshape(1, d.g.shape[-1], -1)


def _broadcast(d: _Dual, n: int) -> _Dual:
    v, g, h = _unsqueeze(d) if d.v.ndim == 0 else (d.v, d.g, d.h)
    return _Dual(np.repeat(v, n), np.repeat(g, n, axis=0), np.repeat(h, n, axis=0))
