"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Seeds are fixed, so every run reproduces the same numbers. The slow
criteria (recovery, in-sample/out-of-sample comparison, Wald calibration)
run on the full panel sizes and take several minutes each.
"""

import hashlib
import json

import numpy as np
import pytest
from scipy import integrate, stats

from conftest import criterion, short_lag_model
from onarch import parallel
from onarch.calibration import calibrate, constraint_identity, mle_parametric
from onarch.cli import main
from onarch.data import compute_returns, denormalize, ingest_ohlc, normalize_panel
from onarch.evaluation import extract_residuals, isos_compare, wald_universality
from onarch.kernels import KernelSpec
from onarch.likelihood import Likelihood, PanelData, student_loglik
from onarch.model import (
    DAY,
    NIGHT,
    DailyArchParams,
    EquationParams,
    bordered_matrix,
    build_quadratic_matrix,
    filter_volatility,
    reference_model,
    reference_stderr,
    regressor_vector,
)
from onarch.parametrization import StandardMap
from onarch.simulate import SimConfig, simulate_panel
from onarch.validity import (
    bordered_is_psd,
    check_positivity,
    check_positivity_double,
    check_positivity_leverage,
    check_positivity_single,
    check_stability,
    empirical_positivity,
    min_eigenvalue,
)

Q_REF = 512


# ---------------------------------------------------------------------------
# 1. stability of the bundled estimates


def test_criterion_1_stability():
    with criterion(1, "stability eigenvalues of the bundled model", 1.0) as d:
        rep = check_stability(reference_model(Q_REF))
        l1, l2 = rep.eigenvalues
        d.update(lambda1=round(l1, 4), lambda2=round(l2, 4))
        assert rep.stable
        assert abs(l1 - 0.94) <= 0.02
        assert abs(l2 - 0.48) <= 0.02


# ---------------------------------------------------------------------------
# 2. positivity of the bundled estimates


def test_criterion_2_positivity():
    with criterion(2, "positivity criteria and empirical check", 120.0) as d:
        model = reference_model(Q_REF)
        for p in (model.day, model.night):
            short = check_positivity(
                p, 126, q_fit=Q_REF, stderr=reference_stderr(p.equation), omega_upper_bound=True
            )
            long_ = check_positivity(p, Q_REF)
            d[f"{p.equation}_q126"] = short.overall
            d[f"{p.equation}_q512_sufficient"] = long_.criterion_double.passed
            assert short.overall and short.criterion_double.passed and short.criterion_leverage.passed
            assert not long_.criterion_double.passed
        emp = empirical_positivity(model, 1_000_000, seed=0)
        d.update(stock_days=emp.stock_days, negatives=emp.n_negative)
        assert emp.stock_days >= 1_000_000
        assert emp.n_negative == 0


# ---------------------------------------------------------------------------
# 3. positivity criteria against exact eigenvalue oracles


def _random_instance(rng):
    q = int(rng.integers(1, 9))
    equation = DAY if rng.random() < 0.5 else NIGHT
    n = q + 1
    dd = rng.uniform(-0.05, 1.0, n)
    nn = rng.uniform(-0.05, 1.0, n)
    scale = rng.uniform(0.05, 1.0)
    root = np.sqrt(np.abs(dd * nn))
    params = EquationParams(
        equation,
        float(rng.uniform(0.01, 2.0)),
        KernelSpec.free(dd),
        KernelSpec.free(nn),
        KernelSpec.free(scale * rng.normal(size=n) * root),
        KernelSpec.free(scale * rng.normal(size=n) * root),
        KernelSpec.free(0.3 * rng.normal(size=n)),
        KernelSpec.free(0.3 * rng.normal(size=n)),
        5.0,
    )
    return params, q


def test_criterion_3_oracle_equivalence():
    with criterion(3, "positivity criteria vs eigenvalue oracles, 200 instances", 60.0) as d:
        rng = np.random.default_rng(20240601)
        single_ok = double_ok = lev_ok = 0
        single_pass = double_pass = lev_pass = 0
        for _ in range(200):
            params, q = _random_instance(rng)
            # single cross kernel: the lag-by-lag criterion is exact
            one = params.replace(K_DN=KernelSpec.zero(q + 1))
            K, _ = build_quadratic_matrix(one, q)
            if one.equation == DAY:
                # the same-day overnight return (lag 0) carries K_NN(1) and no cross term
                nn, unpaired = one.K_NN.values(q + 1)[1:], one.K_NN.values(1)
            else:
                nn, unpaired = one.K_NN.values(q), ()
            verdict = check_positivity_single(one.K_DD.values(q), nn, one.K_ND.values(q), q, unpaired).passed
            single_ok += verdict == (np.linalg.eigvalsh(K)[0] >= 0)
            single_pass += verdict
            # two cross kernels: the chain criterion is sufficient
            dbl = check_positivity_double(params, q)
            double_ok += (not dbl.passed) or min_eigenvalue(params, q) >= -1e-10
            double_pass += dbl.passed
            # leverage: exact given a positive-definite quadratic part
            lev = check_positivity_leverage(params, q).passed
            lev_ok += lev == bordered_is_psd(params, q)
            lev_pass += lev
        d.update(single=f"{single_ok}/200", double=f"{double_ok}/200", leverage=f"{lev_ok}/200",
                 passing=f"{single_pass}/{double_pass}/{lev_pass}")
        assert single_ok == double_ok == lev_ok == 200
        # both verdicts must occur for the comparison to mean anything
        assert 0 < single_pass < 200 and 0 < double_pass < 200 and 0 < lev_pass < 200


# ---------------------------------------------------------------------------
# 4. analytic gradients against finite differences


def _richardson_gradient(fun, x, h):
    def central(step):
        g = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = step[i]
            g[i] = (fun(x + e) - fun(x - e)) / (2 * step[i])
        return g

    return (4 * central(h / 2) - central(h)) / 3


def test_criterion_4_gradients():
    with criterion(4, "likelihood gradients vs finite differences", 300.0) as d:
        model = short_lag_model(16)
        panel = simulate_panel(SimConfig(6, 400, 11, model, burn_in=500))
        daily = DailyArchParams(0.4, KernelSpec.powerlaw(0.15, 1.0, 0.05), KernelSpec.exponential(-0.05, 0.3), 6.0)
        rng = np.random.default_rng(7)
        for target, params in ((DAY, model.day), (NIGHT, model.night), ("daily", daily)):
            pmap = StandardMap(params)
            lik = Likelihood(PanelData(panel, target, model.q), pmap)
            center = pmap.initial()
            worst, points = 0.0, 0
            while points < 100:
                theta = center * (1 + 0.3 * rng.uniform(-1, 1, center.size))
                theta[-1] = rng.uniform(3.0, 30.0)  # degrees of freedom
                if not lik.report(theta).valid:
                    continue
                points += 1
                g = lik.gradient(theta)
                fd = _richardson_gradient(lik.value, theta, 1e-4 * np.maximum(1.0, np.abs(theta)))
                # relative error per component; components below 1e-6 are compared absolutely
                worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6))))
            d[f"{target}_max_rel"] = f"{worst:.1e}"
            assert worst <= 1e-5


# ---------------------------------------------------------------------------
# 5. parameter recovery


def test_criterion_5_recovery():
    with criterion(5, "recovery from a 50 x 2500 simulation", 1800.0) as d:
        truth = reference_model(Q_REF)
        panel = simulate_panel(SimConfig(50, 2500, 0, truth))
        day = calibrate(panel, DAY, q=Q_REF).final
        night = calibrate(panel, NIGHT, q=Q_REF, constrain_s2_zero=True).final
        # dominant diagonal kernel = the one with the larger integrated sum
        for fit, name, ref in ((day, "K_DD", truth.day), (night, "K_NN", truth.night)):
            est, true = fit.params.kernel(name), ref.kernel(name)
            rel = est.g / true.g - 1
            d[f"{ref.equation}_{name}_g_rel"] = round(rel, 3)
            d[f"{ref.equation}_{name}_alpha"] = round(est.alpha, 3)
            assert abs(rel) <= 0.10
            assert abs(est.alpha - true.alpha) <= 0.1
        d.update(nu_D=round(day.params.nu, 2), nu_N=round(night.params.nu, 3))
        assert abs(day.params.nu - truth.day.nu) <= 1.5
        assert abs(night.params.nu - truth.night.nu) <= 0.3
        identity = constraint_identity(night.params, Q_REF, **night.constants)
        d["identity"] = f"{identity:.1e}"
        assert night.params.s2 == 0.0
        assert abs(identity) <= 1e-10


# ---------------------------------------------------------------------------
# 6. in-sample / out-of-sample comparison


def test_criterion_6_isos_direction():
    with criterion(6, "bivariate beats daily ARCH out of sample, 5 seeds", 3600.0) as d:
        truth = reference_model(Q_REF)
        gaps = {t: [] for t in ("D", "N", "r")}
        for seed in range(5):
            panel = simulate_panel(SimConfig(50, 2500, 100 + seed, truth))
            rep = isos_compare(panel, q=Q_REF, seed=seed)
            for t in gaps:
                gaps[t].append(rep.alpp(t, "bivariate") - rep.alpp(t, "daily_arch"))
        for t, g in gaps.items():
            g = np.array(g)
            d[f"{t}_gap"] = f"{g.mean():.3f}+-{g.std(ddof=1):.3f}"
            assert np.all(g > 0)
            assert g.mean() > 2 * g.std(ddof=1)


# ---------------------------------------------------------------------------
# 7. residual law


def test_criterion_7_residual_law():
    with criterion(7, "residual variance, degrees of freedom and density", 120.0) as d:
        model = short_lag_model(64)
        panel = simulate_panel(SimConfig(50, 2000, 0, model, burn_in=1000))
        diag = extract_residuals(model, panel)
        for k, nu in (("D", model.day.nu), ("N", model.night.nu)):
            est = diag.nu_fit[k]
            d[f"{k}_var"] = round(diag.variance[k], 4)
            d[f"{k}_nu_z"] = round((est.nu - nu) / est.stderr, 2)
            assert abs(diag.variance[k] - 1) <= 0.02
            assert abs(est.nu - nu) <= 2 * est.stderr
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(10):
            s2, nu = rng.uniform(0.05, 5.0), rng.uniform(2.1, 50.0)
            dens = lambda r: np.exp(student_loglik(np.array([s2]), np.array([r]), nu, full=True)[0])
            total = integrate.quad(dens, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=500)[0]
            worst = max(worst, abs(total - 1))
        d["density_err"] = f"{worst:.1e}"
        assert worst <= 1e-8


# ---------------------------------------------------------------------------
# 8. Wald test calibration


WALD_TRUTH = DailyArchParams(
    s2=0.4, K=KernelSpec.powerlaw(0.15, 1.0, 0.05), L=KernelSpec.exponential(-0.05, 0.3), nu=6.0
)


def _wald_fit(params, seed):
    panel = simulate_panel(SimConfig(20, 1500, seed, params, q=16, burn_in=500))
    return mle_parametric(panel, "daily", 16, init=WALD_TRUTH)


def test_criterion_8_wald_calibration():
    with criterion(8, "Wald p-values uniform under the null, powerful at 5 stderr", 3600.0) as d:
        # alternative: the amplitude of K moved by 5 standard errors of the tested difference
        pilot = _wald_fit(WALD_TRUTH, 10_000)
        shift = 5 * np.sqrt(2) * pilot.stderr["g_K"]
        k = WALD_TRUTH.K
        alternative = WALD_TRUTH.replace(K=KernelSpec.powerlaw(k.g + shift, k.alpha, k.omega))
        p_null, p_alt = [], []
        for seed in range(50):
            base = _wald_fit(WALD_TRUTH, 2 * seed)
            p_null.append(wald_universality(base, _wald_fit(WALD_TRUTH, 2 * seed + 1)).p_value)
            p_alt.append(wald_universality(base, _wald_fit(alternative, 2 * seed + 1)).p_value)
        ks = stats.kstest(p_null, "uniform").statistic
        power = float(np.mean(np.array(p_alt) < 0.01))
        d.update(ks=round(ks, 3), power=power, shift=round(shift, 4))
        assert ks < 0.2
        assert power >= 0.9


# ---------------------------------------------------------------------------
# 9. pipeline invariants


def _ohlc_files(directory, n_stocks=5, n_days=300, seed=0):
    rng = np.random.default_rng(seed)
    dates = np.busday_offset(np.datetime64("2019-01-02"), np.arange(n_days), roll="forward")
    paths = []
    for s in range(n_stocks):
        close = 30 * np.exp(np.cumsum(0.02 * rng.standard_normal(n_days)))
        open_ = close * np.exp(0.01 * rng.standard_normal(n_days))
        lines = ["date,open,high,low,close"]
        lines += [f"{t},{o:.15g},{max(o, c) * 1.01:.15g},{min(o, c) * 0.99:.15g},{c:.15g}" for t, o, c in zip(dates, open_, close)]
        path = directory / f"S{s}.csv"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_9_invariants(tmp_path):
    with criterion(9, "pipeline invariants", 60.0) as d:
        ohlc = ingest_ohlc(_ohlc_files(tmp_path))
        raw = compute_returns(ohlc)
        # normalization round trip
        norm = normalize_panel(raw)
        rD, rN = denormalize(norm)
        means = norm.normalization.temporal_means
        err = max(np.nanmax(np.abs(rD + means[0][:, None] - raw.rD)), np.nanmax(np.abs(rN + means[1][:, None] - raw.rN)))
        d["round_trip"] = f"{err:.1e}"
        assert err <= 1e-10
        # daily log-return from closes equals the sum of its two parts
        close_to_close = np.log(ohlc.close[:, 1:] / ohlc.close[:, :-1])
        add = float(np.nanmax(np.abs(close_to_close - (raw.rD[:, 1:] + raw.rN[:, 1:]))))
        d["additivity"] = f"{add:.1e}"
        assert add <= 1e-12
        # recursive filter against the explicit quadratic form
        model = short_lag_model(16)
        rng = np.random.default_rng(5)
        x = (rng.standard_normal((2, 80)), 0.6 * rng.standard_normal((2, 80)))
        filt = dict(zip((DAY, NIGHT), filter_volatility(model, x)))
        quad_err = 0.0
        for params in (model.day, model.night):
            K, L = build_quadratic_matrix(params, model.q)
            M = bordered_matrix(params, model.q)
            for i in range(2):
                for t in range(model.q, 80):
                    R = regressor_vector(x, i, t, params.equation, model.q)
                    target = filt[params.equation].sigma2[i, t - model.q]
                    Rb = np.append(R, 1.0)
                    quad_err = max(quad_err, abs(R @ K @ R + L @ R + params.s2 - target), abs(Rb @ M @ Rb - target))
        d["filter_vs_quadratic"] = f"{quad_err:.1e}"
        assert quad_err <= 1e-12
        # byte-exact outputs across thread counts
        files = []
        for params in (model.day, model.night):
            files.append(tmp_path / f"{params.equation}.json")
            files[-1].write_text(json.dumps(params.to_dict()))
        digests = {}
        for threads in (1, 2, 4):
            run = tmp_path / f"threads{threads}"
            run.mkdir()
            sim, fit = run / "sim.csv", run / "fit.json"
            args = ["--threads", str(threads)]
            assert main(["simulate", "--model", *map(str, files), "--stocks", "4", "--days", "300", "--q", "16",
                         "--burn-in", "300", "--seed", "3", "--out", str(sim), *args]) == 0
            assert main(["calibrate", "--panel", str(sim), "--target", "day", "--q-free", "8", "--q", "16",
                         "--max-iter", "200", "--out", str(fit), *args]) == 0
            digests[threads] = (_sha(sim), _sha(fit))
        for threads in (1, 4):
            with parallel.threads(threads):
                lik = Likelihood(PanelData(norm, DAY, 8), StandardMap(model.day))
                digests[f"lik{threads}"] = lik.value_grad_hess(StandardMap(model.day).initial())[2].tobytes()
        d["deterministic"] = len(set(digests[t] for t in (1, 2, 4))) == 1 and digests["lik1"] == digests["lik4"]
        assert d["deterministic"]
