import time
from contextlib import contextmanager

import numpy as np
import pytest

from onarch.model import BivariateModel, reference_model
from onarch.simulate import SimConfig, simulate_panel
from onarch.validity import rebaseline_s2


def short_lag_model(q: int) -> BivariateModel:
    """Reference model truncated at ``q`` with the lost kernel mass moved to the baseline."""
    m = reference_model(512)
    day = m.day.replace(s2=rebaseline_s2(m.day, 512, q))
    night = m.night.replace(s2=rebaseline_s2(m.night, 512, q))
    return BivariateModel(day, night, q)


@pytest.fixture(scope="session")
def small_model():
    return short_lag_model(16)


@pytest.fixture(scope="session")
def small_panel(small_model):
    return simulate_panel(SimConfig(6, 400, 11, small_model, burn_in=500))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_force_day(p, rD, rN, t, q):
    """Day variance at date t written term by term from the model definition."""
    K = lambda name, tau: p.kernel(name).values(tau)[tau - 1]
    s = p.s2
    for tau in range(1, q + 1):
        s += K("L_D", tau) * rD[t - tau] + K("K_DD", tau) * rD[t - tau] ** 2
        s += 2 * K("K_ND", tau) * rD[t - tau] * rN[t - tau]
    for tau in range(0, q + 1):
        s += K("L_N", tau + 1) * rN[t - tau] + K("K_NN", tau + 1) * rN[t - tau] ** 2
    for tau in range(0, q):
        s += 2 * K("K_DN", tau + 1) * rD[t - tau - 1] * rN[t - tau]
    return s


def brute_force_night(p, rD, rN, t, q):
    K = lambda name, tau: p.kernel(name).values(tau)[tau - 1]
    s = p.s2
    for tau in range(1, q + 1):
        s += K("L_N", tau) * rN[t - tau] + K("K_NN", tau) * rN[t - tau] ** 2
        s += 2 * K("K_ND", tau) * rD[t - tau] * rN[t - tau]
        s += K("L_D", tau) * rD[t - tau] + K("K_DD", tau) * rD[t - tau] ** 2
    for tau in range(1, q):
        s += 2 * K("K_DN", tau) * rD[t - tau - 1] * rN[t - tau]
    return s


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_ACCEPTANCE: list[str] = []


@contextmanager
def criterion(number: int, title: str, budget_seconds: float):
    """Record a PASS/FAIL line for an acceptance criterion.

    The body fills the yielded dict with measured values; an exception or a
    runtime above ``budget_seconds`` makes the criterion fail.
    """
    detail: dict = {}
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield detail
        elapsed = time.perf_counter() - start
        detail["runtime_s"] = round(elapsed, 1)
        assert elapsed < budget_seconds, f"runtime {elapsed:.1f}s exceeds {budget_seconds}s"
        status = "PASS"
    finally:
        detail.setdefault("runtime_s", round(time.perf_counter() - start, 1))
        text = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {number} {status}: {title} ({text})"
        _ACCEPTANCE.append(line)
        print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
