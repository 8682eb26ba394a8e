import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import t as student_t

from onarch.kernels import KernelSpec
from onarch.likelihood import Likelihood, PanelData, panel_loglik, student_derivs, student_loglik
from onarch.model import DailyArchParams, EquationParams
from onarch.parametrization import ConstrainedNightMap, StandardMap


def test_student_density_matches_scaled_t():
    sigma2, nu, r = 2.0, 5.0, np.linspace(-4, 4, 9)
    scale = np.sqrt(sigma2 * (nu - 2) / nu)
    expected = student_t.logpdf(r, nu, scale=scale)
    np.testing.assert_allclose(student_loglik(sigma2, r, nu), expected, rtol=1e-12)


def test_student_density_integrates_to_one_with_unit_scale_variance():
    for sigma2, nu in ((0.5, 3.0), (4.0, 30.0)):
        f = lambda x: np.exp(student_loglik(sigma2, x, nu))
        assert quad(f, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)[0] == pytest.approx(1.0, abs=1e-8)
        var = quad(lambda x: x * x * f(x), -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12)[0]
        assert var == pytest.approx(sigma2, rel=1e-7)


def test_gaussian_limit_and_invalid_variance():
    r = np.array([0.3, -1.2])
    gauss = -0.5 * np.log(2 * np.pi * 1.5) - r**2 / 3.0
    np.testing.assert_allclose(student_loglik(1.5, r, np.inf), gauss, rtol=1e-14)
    np.testing.assert_allclose(student_loglik(1.5, r, 1e8), gauss, rtol=1e-6)
    assert student_loglik(np.array([-1.0]), np.array([0.1]), 5.0)[0] == -np.inf


def test_student_derivatives_against_finite_differences():
    v, r, nu, h = np.array([0.7, 2.0]), np.array([1.1, -0.4]), 4.5, 1e-5
    d = student_derivs(v, r, nu)
    f = lambda v_, n_: student_loglik(v_, r, n_)
    np.testing.assert_allclose(d.f_v, (f(v + h, nu) - f(v - h, nu)) / (2 * h), rtol=1e-7)
    np.testing.assert_allclose(d.f_n, (f(v, nu + h) - f(v, nu - h)) / (2 * h), rtol=1e-6)
    dv = lambda n_: student_derivs(v, r, n_).f_v
    np.testing.assert_allclose(d.f_vn, (dv(nu + h) - dv(nu - h)) / (2 * h), rtol=1e-6)
    np.testing.assert_allclose(d.f_vv, (student_derivs(v + h, r, nu).f_v - student_derivs(v - h, r, nu).f_v) / (2 * h), rtol=1e-6)
    np.testing.assert_allclose(d.f_nn, (student_derivs(v, r, nu + h).f_n - student_derivs(v, r, nu - h).f_n) / (2 * h), rtol=1e-5)


def _central_gradient(fun, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h * max(1.0, abs(theta[i]))
        g[i] = (fun(theta + e) - fun(theta - e)) / (2 * e[i])
    return g


@pytest.mark.parametrize("target", ["day", "night"])
def test_parametric_gradient_and_hessian(small_model, small_panel, target):
    params = small_model.equation(target)
    data = PanelData(small_panel, target, small_model.q)
    lik = Likelihood(data, StandardMap(params))
    theta = StandardMap(params).initial()
    value, grad, hess = lik.value_grad_hess(theta)
    assert value == pytest.approx(lik.value(theta))
    np.testing.assert_allclose(lik.gradient(theta), grad, rtol=1e-10, atol=1e-14)
    fd = _central_gradient(lik.value, theta)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)
    fd_h = np.column_stack([_central_gradient(lambda t: lik.gradient(t)[i], theta) for i in range(theta.size)]).T
    np.testing.assert_allclose(hess, fd_h, rtol=1e-4, atol=1e-7)


def test_free_kernel_gradient(small_panel):
    q = 8
    rng = np.random.default_rng(0)
    p = EquationParams(
        "day", 0.5,
        K_DD=KernelSpec.free(0.02 * rng.random(q)), K_NN=KernelSpec.free(0.02 * rng.random(q + 1)),
        K_ND=KernelSpec.free(0.01 * rng.random(q)), K_DN=KernelSpec.free(0.01 * rng.random(q)),
        L_D=KernelSpec.free(-0.01 * rng.random(q)), L_N=KernelSpec.free(-0.01 * rng.random(q + 1)), nu=8.0,
    )
    lik = Likelihood(PanelData(small_panel, "day", q), StandardMap(p))
    theta = StandardMap(p).initial()
    _, grad, _ = lik.value_grad_hess(theta)
    np.testing.assert_allclose(grad, _central_gradient(lik.value, theta), rtol=1e-4, atol=1e-8)


def test_constrained_map_keeps_identity_and_gradient(small_model, small_panel):
    q = small_model.q
    night = small_model.night.replace(s2=0.0)
    pmap = ConstrainedNightMap(night, q, c=0.05)
    theta = pmap.initial()
    assert abs(pmap.constraint_residual(theta)) <= 1e-12
    lik = Likelihood(PanelData(small_panel, "night", q), pmap)
    _, grad, hess = lik.value_grad_hess(theta)
    np.testing.assert_allclose(grad, _central_gradient(lik.value, theta), rtol=1e-4, atol=1e-8)
    fd_h = np.column_stack([_central_gradient(lambda t: lik.gradient(t)[i], theta) for i in range(5)]).T
    np.testing.assert_allclose(hess, fd_h, rtol=1e-4, atol=1e-7)


def test_report_flags_negative_variances(small_panel):
    p = EquationParams.zero("day", s2=-1.0, nu=5.0)
    rep = panel_loglik(p, small_panel, q=4)
    assert not rep.valid and rep.negative_variance_count > 0 and rep.loglik_per_point == -np.inf


def test_daily_target_and_alpp():
    rng = np.random.default_rng(2)
    r = rng.standard_normal((3, 300))
    p = DailyArchParams(s2=1.0, K=KernelSpec.powerlaw(0.0, 1.0, 0.0), L=KernelSpec.exponential(0.0, 0.0), nu=np.inf)
    rep = panel_loglik(p, (r, np.zeros_like(r)), q=5)
    expected = np.mean(-0.5 * np.log(2 * np.pi) - 0.5 * r[:, 5:] ** 2)
    assert rep.loglik_per_point == pytest.approx(expected, rel=1e-12)
    assert rep.alpp == pytest.approx(100 * np.exp(expected))
    assert rep.n_points == 3 * 295
