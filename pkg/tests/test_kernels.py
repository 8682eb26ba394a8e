import numpy as np
import pytest

from onarch.kernels import KernelSpec, eval_kernel, h_sum, integrated_kernel


def test_powerlaw_value_at_first_lag():
    k = KernelSpec.powerlaw(0.0799, 0.71, 0.0064)
    assert eval_kernel(k, 1) == pytest.approx(0.0799 * np.exp(-0.0064), rel=1e-14)
    assert eval_kernel(k, 1) == pytest.approx(0.07939, abs=5e-6)


def test_powerlaw_matches_direct_formula():
    k = KernelSpec.powerlaw(0.05, 0.8, 0.01)
    tau = np.arange(1, 101)
    np.testing.assert_allclose(k.values(100), 0.05 * tau**-0.8 * np.exp(-0.01 * tau), rtol=1e-14)


def test_exponential_and_free():
    e = KernelSpec.exponential(-0.02, 0.1)
    np.testing.assert_allclose(e.values(3), -0.02 * np.exp(-0.1 * np.arange(1, 4)))
    f = KernelSpec.free([0.3, 0.2, 0.1])
    np.testing.assert_array_equal(f.values(2), [0.3, 0.2])
    with pytest.raises(ValueError):
        f.values(4)


def test_zero_decay_is_pure_power_law_and_has_no_cutoff():
    k = KernelSpec.powerlaw(1.0, 1.5, 0.0)
    assert k.tau_cutoff == np.inf
    assert h_sum(1.5, 0.0, 1000) == pytest.approx(np.sum(np.arange(1, 1001) ** -1.5), rel=1e-13)


def test_lag_outside_range_is_rejected():
    k = KernelSpec.powerlaw(1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        eval_kernel(k, 0)
    with pytest.raises(ValueError):
        eval_kernel(k, 10, q=5)


def test_invalid_shape_parameters():
    with pytest.raises(ValueError):
        KernelSpec.powerlaw(1.0, -0.1, 0.0)
    with pytest.raises(ValueError):
        KernelSpec.exponential(1.0, -1.0)
    with pytest.raises(ValueError):
        KernelSpec("gaussian")


@pytest.mark.parametrize("spec", [KernelSpec.powerlaw(0.07, 0.9, 0.02), KernelSpec.exponential(-0.03, 0.15)])
def test_jacobian_and_hessian_against_finite_differences(spec):
    n, h = 40, 1e-6
    p0 = spec.params
    J = spec.jacobian(n)
    H = spec.hessian(n)
    for i in range(p0.size):
        e = np.zeros_like(p0)
        e[i] = h
        up, dn = spec.with_params(p0 + e), spec.with_params(p0 - e)
        np.testing.assert_allclose(J[:, i], (up.values(n) - dn.values(n)) / (2 * h), rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(H[:, :, i], (up.jacobian(n) - dn.jacobian(n)) / (2 * h), rtol=1e-5, atol=1e-10)


def test_integrated_kernel_and_round_trip():
    k = KernelSpec.powerlaw(0.0364, 0.58, 0.0058)
    assert integrated_kernel(k, 10) == pytest.approx(k.values(10).sum())
    assert KernelSpec.from_dict(k.to_dict()) == k
    f = KernelSpec.free([1.0, 2.0])
    np.testing.assert_array_equal(KernelSpec.from_dict(f.to_dict()).coefficients, [1.0, 2.0])
