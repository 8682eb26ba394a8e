"""Feedback kernels: truncated power laws, exponentials and tabulated lags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

POWERLAW_EXP = "powerlaw_exp"
EXPONENTIAL = "exponential"
FREE = "free"

_SHAPE_PARAMS = {
    POWERLAW_EXP: ("g", "alpha", "omega"),
    EXPONENTIAL: ("g", "omega"),
    FREE: (),
}


@dataclass(frozen=True)
class KernelSpec:
    """A lag kernel K(tau) for tau = 1, 2, ...

    ``powerlaw_exp`` is ``g * tau**-alpha * exp(-omega * tau)``, ``exponential``
    is ``g * exp(-omega * tau)``, ``free`` tabulates ``coefficients[tau - 1]``.
    The maximum lag is not a property of the kernel; callers ask for as many
    lags as their regressor window needs.
    """

    shape: str
    g: float = 0.0
    alpha: float = 0.0
    omega: float = 0.0
    coefficients: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.shape not in _SHAPE_PARAMS:
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        if self.shape == FREE:
            if self.coefficients is None:
                raise ValueError("free kernel needs coefficients")
            coef = np.asarray(self.coefficients, dtype=float).ravel()
            if coef.size < 1:
                raise ValueError("free kernel needs at least one coefficient")
            object.__setattr__(self, "coefficients", coef)
        else:
            if self.omega < 0:
                raise ValueError("decay rate omega must be >= 0")
            if self.shape == POWERLAW_EXP and self.alpha < 0:
                raise ValueError("exponent alpha must be >= 0")

    # construction helpers
    @classmethod
    def powerlaw(cls, g: float, alpha: float, omega: float) -> "KernelSpec":
        return cls(POWERLAW_EXP, g=float(g), alpha=float(alpha), omega=float(omega))

    @classmethod
    def exponential(cls, g: float, omega: float) -> "KernelSpec":
        return cls(EXPONENTIAL, g=float(g), omega=float(omega))

    @classmethod
    def free(cls, coefficients) -> "KernelSpec":
        return cls(FREE, coefficients=np.asarray(coefficients, dtype=float))

    @classmethod
    def zero(cls, n: int = 1) -> "KernelSpec":
        return cls.free(np.zeros(n))

    @property
    def param_names(self) -> tuple[str, ...]:
        return _SHAPE_PARAMS[self.shape]

    @property
    def params(self) -> np.ndarray:
        return np.array([getattr(self, p) for p in self.param_names], dtype=float)

    def with_params(self, values) -> "KernelSpec":
        kw = dict(zip(self.param_names, map(float, values)))
        return KernelSpec(self.shape, **kw)

    @property
    def max_lag(self) -> float:
        """Largest lag the kernel can be evaluated at."""
        return float(self.coefficients.size) if self.shape == FREE else np.inf

    @property
    def tau_cutoff(self) -> float:
        """Characteristic time 1/omega (infinite when omega is 0)."""
        if self.shape == FREE:
            raise ValueError("free kernels have no cutoff time")
        return np.inf if self.omega == 0 else 1.0 / self.omega

    def values(self, n: int) -> np.ndarray:
        """K(1), ..., K(n)."""
        if n < 0:
            raise ValueError("n must be >= 0")
        if self.shape == FREE:
            if n > self.coefficients.size:
                raise ValueError(
                    f"free kernel has {self.coefficients.size} lags, {n} requested"
                )
            return self.coefficients[:n].copy()
        tau = np.arange(1, n + 1, dtype=float)
        if self.shape == POWERLAW_EXP:
            return self.g * tau ** (-self.alpha) * np.exp(-self.omega * tau)
        return self.g * np.exp(-self.omega * tau)

    def jacobian(self, n: int) -> np.ndarray:
        """d K(tau) / d params, shape (n, n_params)."""
        tau = np.arange(1, n + 1, dtype=float)
        if self.shape == POWERLAW_EXP:
            base = tau ** (-self.alpha) * np.exp(-self.omega * tau)
            k = self.g * base
            return np.column_stack([base, -np.log(tau) * k, -tau * k])
        if self.shape == EXPONENTIAL:
            base = np.exp(-self.omega * tau)
            return np.column_stack([base, -tau * self.g * base])
        return np.eye(n, self.coefficients.size)

    def hessian(self, n: int) -> np.ndarray:
        """Second derivatives of K(tau) w.r.t. params, shape (n, p, p)."""
        tau = np.arange(1, n + 1, dtype=float)
        if self.shape == POWERLAW_EXP:
            base = tau ** (-self.alpha) * np.exp(-self.omega * tau)
            k = self.g * base
            lt = np.log(tau)
            h = np.zeros((n, 3, 3))
            h[:, 0, 1] = h[:, 1, 0] = -lt * base
            h[:, 0, 2] = h[:, 2, 0] = -tau * base
            h[:, 1, 1] = lt**2 * k
            h[:, 1, 2] = h[:, 2, 1] = tau * lt * k
            h[:, 2, 2] = tau**2 * k
            return h
        if self.shape == EXPONENTIAL:
            base = np.exp(-self.omega * tau)
            h = np.zeros((n, 2, 2))
            h[:, 0, 1] = h[:, 1, 0] = -tau * base
            h[:, 1, 1] = tau**2 * self.g * base
            return h
        return np.zeros((n, 0, 0))

    def to_dict(self) -> dict[str, Any]:
        if self.shape == FREE:
            return {"shape": FREE, "coefficients": self.coefficients.tolist()}
        out: dict[str, Any] = {"shape": self.shape}
        out.update({p: getattr(self, p) for p in self.param_names})
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KernelSpec":
        shape = d["shape"]
        if shape == FREE:
            return cls.free(d["coefficients"])
        return cls(shape, **{p: float(d[p]) for p in _SHAPE_PARAMS[shape]})


def eval_kernel(spec: KernelSpec, tau: int, q: int | None = None) -> float:
    """Kernel coefficient at lag ``tau``; ``q`` bounds the admissible lags."""
    upper = spec.max_lag if q is None else min(q, spec.max_lag)
    if not 1 <= tau <= upper:
        raise ValueError(f"lag {tau} outside [1, {upper}]")
    return float(spec.values(int(tau))[-1])


def integrated_kernel(spec: KernelSpec, q: int) -> float:
    """Sum of K(tau) over tau = 1..q."""
    return float(spec.values(q).sum())


def h_sum(alpha: float, omega: float, q: int) -> float:
    """Unit-amplitude power-law sum over tau = 1..q."""
    return integrated_kernel(KernelSpec.powerlaw(1.0, alpha, omega), q)
