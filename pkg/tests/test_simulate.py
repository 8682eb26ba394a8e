import numpy as np
import pytest
from scipy import stats

from conftest import short_lag_model
from onarch.kernels import KernelSpec
from onarch.model import DAY, NIGHT, BivariateModel, DailyArchParams, EquationParams
from onarch.simulate import (
    NegativeVarianceError,
    SimConfig,
    UnstableModelError,
    sample_student,
    simulate_panel,
)
from onarch.validity import check_stability


def test_simulation_is_deterministic(small_model):
    cfg = SimConfig(3, 200, 5, small_model, burn_in=200)
    a, b = simulate_panel(cfg), simulate_panel(cfg)
    assert a.rD.tobytes() == b.rD.tobytes()
    assert a.rN.tobytes() == b.rN.tobytes()
    c = simulate_panel(SimConfig(3, 200, 6, small_model, burn_in=200))
    assert not np.array_equal(a.rD, c.rD)


def test_stock_streams_do_not_depend_on_panel_size(small_model):
    small = simulate_panel(SimConfig(2, 150, 9, small_model, burn_in=100))
    large = simulate_panel(SimConfig(5, 150, 9, small_model, burn_in=100))
    np.testing.assert_array_equal(small.rD, large.rD[:2])
    np.testing.assert_array_equal(small.rN, large.rN[:2])


def test_components_add_up(small_panel):
    assert np.array_equal(small_panel.r, small_panel.rD + small_panel.rN)


def test_gaussian_mean_variances_match_fixed_point():
    m = short_lag_model(64)
    gauss = BivariateModel(m.day.replace(nu=np.inf), m.night.replace(nu=np.inf), 64)
    rep = check_stability(gauss)
    sim = simulate_panel(SimConfig(40, 4000, 3, gauss, burn_in=2000), return_diagnostics=True)
    vD, vN = rep.fixed_point
    assert np.mean(sim.panel.rD**2) == pytest.approx(vD, rel=0.05)
    assert np.mean(sim.panel.rN**2) == pytest.approx(vN, rel=0.05)
    assert sim.diagnostics.mean_variance_day == pytest.approx(vD, rel=0.05)
    assert sim.diagnostics.n_negative == 0


def test_unstable_model_is_refused_unless_forced():
    z = EquationParams.zero
    day = z(DAY, s2=0.1).replace(K_DD=KernelSpec.free([1.5, 0.0]))
    model = BivariateModel(day, z(NIGHT, s2=0.1), 1)
    with pytest.raises(UnstableModelError):
        simulate_panel(SimConfig(1, 10, 0, model, burn_in=5))
    panel = simulate_panel(SimConfig(1, 10, 0, model, burn_in=5), force=True)
    assert panel.rD.shape == (1, 10)


def test_negative_variance_raise_and_count():
    z = EquationParams.zero
    day = z(DAY, s2=0.01).replace(L_D=KernelSpec.free([-5.0, 0.0]), K_DD=KernelSpec.free([0.1, 0.0]))
    model = BivariateModel(day, z(NIGHT, s2=1.0), 1)
    with pytest.raises(NegativeVarianceError):
        simulate_panel(SimConfig(4, 500, 0, model, burn_in=10))
    sim = simulate_panel(
        SimConfig(4, 500, 0, model, burn_in=10, on_negative="count"), return_diagnostics=True
    )
    assert sim.diagnostics.n_negative > 0
    assert sim.diagnostics.min_variance < 0


def test_student_draws_have_unit_variance_and_right_kurtosis():
    x = sample_student(8.0, 400_000, seed=1)
    assert np.var(x) == pytest.approx(1.0, rel=0.02)
    # excess kurtosis of a Student law is 6 / (nu - 4)
    assert stats.kurtosis(x) == pytest.approx(1.5, abs=0.3)
    with pytest.raises(ValueError):
        sample_student(2.0, 10)


def test_daily_arch_split_carries_variance_shares():
    params = DailyArchParams(1.0, KernelSpec.zero(4), KernelSpec.zero(4), nu=np.inf)
    cfg = SimConfig(20, 5000, 2, params, q=4, burn_in=10, variance_shares=(0.7, 0.3))
    p = simulate_panel(cfg)
    assert np.array_equal(p.r, p.rD + p.rN)
    assert np.mean(p.rD**2) == pytest.approx(0.7, rel=0.02)
    assert np.mean(p.rN**2) == pytest.approx(0.3, rel=0.03)
    assert abs(np.mean(p.rD * p.rN)) < 0.01
    with pytest.raises(ValueError):
        simulate_panel(SimConfig(1, 10, 0, params, q=4, burn_in=10, variance_shares=(0.01, 2.0)))


def test_config_validation(small_model):
    with pytest.raises(ValueError):
        SimConfig(0, 10, 0, small_model)
    with pytest.raises(ValueError):
        SimConfig(1, 10, 0, small_model, burn_in=2)
    with pytest.raises(ValueError):
        SimConfig(1, 10, 0, small_model, on_negative="ignore")
