import numpy as np
import pytest

from onarch.data import (
    DataError,
    ReturnPanel,
    compute_returns,
    cross_correlations,
    denormalize,
    ingest_ohlc,
    moments_summary,
    normalize_panel,
    read_returns,
    weekly_seasonality,
    write_returns,
)


def write_ohlc(path, rows, header="date,open,high,low,close"):
    path.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


def random_ohlc_panel(tmp_path, n_stocks=4, n_days=120, seed=0):
    rng = np.random.default_rng(seed)
    dates = np.busday_offset(np.datetime64("2021-01-04"), np.arange(n_days), roll="forward")
    paths = []
    for s in range(n_stocks):
        close = 50 * np.exp(np.cumsum(0.02 * rng.standard_normal(n_days)))
        open_ = close * np.exp(0.01 * rng.standard_normal(n_days))
        rows = [(d, o, max(o, c) * 1.01, min(o, c) * 0.99, c) for d, o, c in zip(dates, open_, close)]
        paths.append(write_ohlc(tmp_path / f"STK{s}.csv", rows))
    return paths


def test_intraday_return_of_one_percent_move(tmp_path):
    p = write_ohlc(tmp_path / "A.csv", [("2020-01-02", 100, 101, 99, 101), ("2020-01-03", 102, 103, 100, 101)])
    ret = compute_returns(ingest_ohlc([p]))
    assert ret.rD[0, 0] == pytest.approx(np.log(1.01))
    assert ret.rD[0, 0] == pytest.approx(0.00995, abs=5e-6)
    assert np.isnan(ret.rN[0, 0])
    assert ret.rN[0, 1] == pytest.approx(np.log(102 / 101))


def test_daily_return_is_sum_of_components(tmp_path):
    panel = ingest_ohlc(random_ohlc_panel(tmp_path))
    ret = compute_returns(panel)
    close_to_close = np.log(panel.close[:, 1:] / panel.close[:, :-1])
    assert np.max(np.abs(ret.r[:, 1:] - close_to_close)) <= 1e-12


def test_invalid_prices_are_rejected_with_location(tmp_path):
    p = write_ohlc(tmp_path / "A.csv", [("2020-01-02", 100, 101, 99, 101), ("2020-01-03", -1, 103, 100, 101)])
    with pytest.raises(DataError, match=r"A.csv:3: non-positive price"):
        ingest_ohlc([p])
    p = write_ohlc(tmp_path / "B.csv", [("2020-01-02", 100, 101, 100.5, 101)])
    with pytest.raises(DataError, match="low"):
        ingest_ohlc([p])
    p = write_ohlc(tmp_path / "C.csv", [("2020-01-02", 100, 101, 99, 101), ("2020-01-02", 100, 101, 99, 101)])
    with pytest.raises(DataError, match="duplicate date"):
        ingest_ohlc([p])
    with pytest.raises(DataError, match="no such file"):
        ingest_ohlc([tmp_path / "missing.csv"])


def test_long_layout_and_calendar_union(tmp_path):
    p = tmp_path / "long.csv"
    p.write_text(
        "ticker,date,open,close\n"
        "AAA,2020-01-02,10,11\nAAA,2020-01-03,11,12\n"
        "BBB,2020-01-03,20,21\n"
    )
    panel = ingest_ohlc([p])
    assert panel.stocks == ["AAA", "BBB"]
    assert panel.dates.size == 2
    assert panel.gaps == {"BBB": ["2020-01-02"]}


def test_long_gap_is_flagged(tmp_path):
    p = write_ohlc(tmp_path / "A.csv", [("2020-01-02", 100, 101, 99, 100), ("2020-01-20", 100, 101, 99, 100)])
    ret = compute_returns(ingest_ohlc([p]))
    assert ret.gap_flags[0, 1]


def test_normalization_gives_unit_second_moments_and_round_trips(tmp_path):
    raw = compute_returns(ingest_ohlc(random_ohlc_panel(tmp_path, seed=3)))
    norm = normalize_panel(raw)
    for x in (norm.rD, norm.rN):
        np.testing.assert_allclose(np.nanmean(x * x, axis=1), 1.0, rtol=1e-12)
    assert np.nanmax(np.abs(norm.r - (norm.rD + norm.rN))) == 0.0
    d, n = denormalize(norm)
    rec = norm.normalization
    assert np.nanmax(np.abs(d + rec.temporal_means[0][:, None] - raw.rD)) <= 1e-10
    assert np.nanmax(np.abs(n + rec.temporal_means[1][:, None] - raw.rN)) <= 1e-10


def test_normalization_rejects_zero_dispersion():
    rD = np.zeros((3, 5))
    ret = ReturnPanel.from_components(["a", "b", "c"], np.arange(5).astype("datetime64[D]"), rD, rD + 1.0)
    with pytest.raises(DataError, match="dispersion"):
        normalize_panel(ret)


def test_descriptive_statistics():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 2000))
    ret = ReturnPanel.from_components([f"s{i}" for i in range(20)], np.arange(2000).astype("datetime64[D]"), x, 0.5 * rng.standard_normal((20, 2000)))
    m = moments_summary(ret)
    assert m.intraday.kurtosis == pytest.approx(3.0, abs=0.1)
    assert abs(m.intraday.skewness) < 0.05
    cc = cross_correlations(ret)
    assert abs(cc.night_day) < 0.02
    assert cc.additivity_deviation < 0.02
    seas = weekly_seasonality(ret)
    assert seas["intraday"].shape == (5,)
    assert np.nanmean(seas["intraday"]) == pytest.approx(1.0)


def test_constant_returns_are_degenerate():
    x = np.zeros((2, 10))
    ret = ReturnPanel.from_components(["a", "b"], np.arange(10).astype("datetime64[D]"), x, x)
    assert moments_summary(ret).intraday.degenerate


def test_csv_round_trip_with_normalization_sidecar(tmp_path):
    raw = compute_returns(ingest_ohlc(random_ohlc_panel(tmp_path, n_days=40)))
    norm = normalize_panel(raw)
    path = tmp_path / "panel.csv"
    write_returns(norm, path)
    back = read_returns(path)
    assert back.tickers == norm.tickers
    np.testing.assert_allclose(back.rD, norm.rD, rtol=1e-15, equal_nan=True)
    np.testing.assert_allclose(back.rN, norm.rN, rtol=1e-15, equal_nan=True)
    np.testing.assert_allclose(back.normalization.historical_stds, norm.normalization.historical_stds)


def test_malformed_panel_csv(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("ticker,date,r_intraday,r_overnight,r_daily\nA,2020-01-01,abc,0,0\n")
    with pytest.raises(DataError, match="bad.csv:2"):
        read_returns(p)
