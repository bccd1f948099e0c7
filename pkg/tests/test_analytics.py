import io
import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetemit.analytics import (
    EuroStandard,
    SummaryStats,
    compliance_rates,
    daily_series,
    fleet_gap,
    holdout_accuracy,
    load_euro_standards,
    lowess,
    pearson_r,
    region_gap_report,
    summarize,
    write_compliance,
    write_daily_series,
    write_fleet_summary,
    write_region_gaps,
)
from fleetemit.cart import RegressionTree
from fleetemit.fleet import FleetObservation, Window
from fleetemit.impute import ImputedEmissions

from oracles import sort_quantile


def stats(mean, median=None):
    median = mean if median is None else median
    return SummaryStats(n=10, mean=mean, median=median, q1=0, q3=1,
                        whisker_low=0, whisker_high=1)


def observation(fleet, when, co2, region=None, fuel="DIE", vid="V"):
    values = {"co2_g_km": co2, "nox_mg_km": None, "thc_mg_km": None,
              "co_mg_km": None, "mpg": None}
    values = {k: v for k, v in values.items()}
    emissions = ImputedEmissions(vid, values, {k: "tree-imputed" for k in values})
    return FleetObservation(vid, fleet, when, 5.0, region, fuel, emissions)


# ---------------------------------------------------------------------------
# summarize


def test_single_value_summary():
    s = summarize([7.5])
    assert (s.n, s.mean, s.median, s.q1, s.q3) == (1, 7.5, 7.5, 7.5, 7.5)
    assert s.whisker_low == s.whisker_high == 7.5


def test_symmetric_three_values():
    s = summarize([1.0, 2.0, 3.0])
    assert s.mean == 2.0
    assert s.median == 2.0


def test_summary_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        v = rng.normal(170, 30, size=int(rng.integers(2, 400)))
        s = summarize(v)
        assert s.mean == v.mean()
        assert abs(s.median - sort_quantile(v, 0.5)) < 1e-9
        assert abs(s.q1 - sort_quantile(v, 0.25)) < 1e-9
        assert abs(s.q3 - sort_quantile(v, 0.75)) < 1e-9
        iqr = s.q3 - s.q1
        inside = v[(v >= s.q1 - 1.5 * iqr) & (v <= s.q3 + 1.5 * iqr)]
        assert s.whisker_low == inside.min()
        assert s.whisker_high == inside.max()


def test_summarize_empty_raises():
    with pytest.raises(ValueError):
        summarize([])


# ---------------------------------------------------------------------------
# fleet_gap


def test_gap_co2_fleet_means():
    g = fleet_gap(stats(197.0), stats(174.4))
    assert g.mean_gap == pytest.approx(22.6, abs=1e-9)
    assert g.mean_pct == pytest.approx(0.1296, abs=0.0005)  # the 13% gap


def test_gap_mpg_fleet_means():
    g = fleet_gap(stats(38.5), stats(41.8))
    assert g.mean_gap == pytest.approx(-3.3, abs=1e-9)
    assert g.mean_pct == pytest.approx(-0.0789, abs=0.0005)
    vs_on_road = fleet_gap(stats(38.5), stats(44.4))
    assert vs_on_road.mean_pct == pytest.approx(-0.1329, abs=0.0005)


def test_identical_fleets_zero_gap():
    g = fleet_gap(stats(5.0), stats(5.0))
    assert g.mean_gap == 0.0
    assert g.mean_pct == 0.0
    assert g.median_gap == 0.0


# ---------------------------------------------------------------------------
# daily series


def test_one_observation_one_day():
    window = Window(date(2020, 1, 1), date(2020, 1, 10))
    points = daily_series([observation("exported", date(2020, 1, 3), 180.0)],
                          "co2_g_km", window)
    assert len(points) == 10 * 3  # every day, every fleet
    filled = [p for p in points if p.count > 0]
    assert len(filled) == 1
    assert filled[0].mean == 180.0
    assert filled[0].fleet == "exported"


def test_constant_metric_constant_series():
    window = Window(date(2020, 1, 1), date(2020, 1, 5))
    obs = [observation("scrapped", date(2020, 1, 1) + timedelta(days=i), 170.0)
           for i in range(5)]
    points = [p for p in daily_series(obs, "co2_g_km", window) if p.count > 0]
    assert all(p.mean == 170.0 for p in points)


def test_linear_trend_recovered():
    window = Window(date(2020, 1, 1), date(2020, 4, 9))
    obs = []
    for i in range(100):
        day = date(2020, 1, 1) + timedelta(days=i)
        for j in range(4):
            obs.append(observation("on_road", day, 100.0 + 0.5 * i, vid=f"V{i}_{j}"))
    points = [p for p in daily_series(obs, "co2_g_km", window) if p.count > 0]
    means = np.array([p.mean for p in points])
    slope = np.polyfit(np.arange(100), means, 1)[0]
    assert slope == pytest.approx(0.5, abs=1e-9)


# ---------------------------------------------------------------------------
# lowess


def test_lowess_reproduces_lines_exactly():
    x = np.arange(50.0)
    y = 3.0 * x - 7.0
    out = lowess(x, y, span=0.3)
    assert np.max(np.abs(out - y)) < 1e-9


def test_lowess_constant_input():
    x = np.arange(30.0)
    out = lowess(x, np.full(30, 4.2), span=0.5)
    assert np.allclose(out, 4.2, atol=1e-12)


def test_lowess_smooths_noise_below_sigma():
    rng = np.random.default_rng(3)
    x = np.linspace(0, 4 * math.pi, 400)
    clean = np.sin(x)
    noisy = clean + rng.normal(0, 0.3, 400)
    out = lowess(x, noisy, span=0.15)
    rms = math.sqrt(float(((out - clean) ** 2).mean()))
    assert rms < 0.3


def test_lowess_shift_equivariance():
    rng = np.random.default_rng(4)
    x = np.arange(80.0)
    y = rng.normal(0, 1, 80)
    base = lowess(x, y, span=0.4)
    shifted = lowess(x, y + 123.25, span=0.4)
    assert np.allclose(shifted, base + 123.25, atol=1e-8)


def test_lowess_rejects_bad_inputs():
    with pytest.raises(ValueError):
        lowess([1.0], [1.0], span=0.5)
    with pytest.raises(ValueError):
        lowess([1.0, 1.0], [1.0, 2.0], span=0.5)  # degenerate x-range
    with pytest.raises(ValueError):
        lowess([1.0, 2.0], [1.0, 2.0], span=0.0)


# ---------------------------------------------------------------------------
# region gaps


def region_observations(region, gap, n=40, base=170.0):
    out = []
    for i in range(n):
        out.append(observation("exported", date(2015, 1, 1), base + gap + (i % 3),
                               region=region, vid=f"E{region}{i}"))
        out.append(observation("scrapped", date(2015, 1, 1), base + (i % 3),
                               region=region, vid=f"S{region}{i}"))
    return out


def test_all_regions_positive_gap():
    obs = []
    for r in range(6):
        obs.extend(region_observations(f"R{r}", +10.0))
    report = region_gap_report(obs, min_n=30)
    assert report.fraction_positive == 1.0
    assert len(report.sufficient_rows) == 6


def test_region_without_scrapped_is_insufficient():
    obs = region_observations("R1", +10.0)
    obs = [o for o in obs if not (o.postcode_region == "R1" and o.fleet == "scrapped")]
    obs.extend(region_observations("R2", +5.0))
    report = region_gap_report(obs, min_n=30)
    rows = {r.region: r for r in report.rows}
    assert not rows["R1"].sufficient
    assert rows["R2"].sufficient
    assert report.fraction_positive == 1.0  # computed over sufficient only


def test_small_region_excluded_by_min_n():
    obs = region_observations("BIG", +10.0, n=40) + region_observations("TINY", -10.0, n=5)
    report = region_gap_report(obs, min_n=30)
    assert [r.region for r in report.sufficient_rows] == ["BIG"]


# ---------------------------------------------------------------------------
# compliance


def diesel(nox, co=400.0):
    return ("DIE", {"co2_g_km": None, "nox_mg_km": nox, "thc_mg_km": None,
                    "co_mg_km": co, "mpg": None})


def euro4():
    return load_euro_standards()["EURO4"]


def test_exactly_at_threshold_passes():
    report = compliance_rates([diesel(nox=250.0)], euro4())
    assert report.rate("DIE", "nox_mg_km") == 0.0
    report = compliance_rates([diesel(nox=250.0000001)], euro4())
    assert report.rate("DIE", "nox_mg_km") == 1.0


def test_fleet_below_thresholds_zero_failure():
    rows = [diesel(nox=100.0) for _ in range(50)]
    report = compliance_rates(rows, euro4())
    assert report.rate("DIE", "joint") == 0.0


def test_constructed_42_percent_failure():
    rows = [diesel(nox=300.0) for _ in range(4200)] + [diesel(nox=100.0) for _ in range(5800)]
    report = compliance_rates(rows, euro4())
    assert report.rate("DIE", "nox_mg_km") == pytest.approx(0.42)


def test_joint_any_pollutant():
    report = compliance_rates([diesel(nox=100.0, co=600.0)], euro4())
    assert report.rate("DIE", "co_mg_km") == 1.0
    assert report.rate("DIE", "nox_mg_km") == 0.0
    assert report.rate("DIE", "joint") == 1.0


def test_standard_without_thresholds_rejected():
    with pytest.raises(ValueError):
        EuroStandard(name="EMPTY", thresholds={})
    with pytest.raises(ValueError):
        EuroStandard(name="BAD", thresholds={"DIE": {"nox_mg_km": -5.0}})


def test_custom_standards_file(tmp_path):
    path = tmp_path / "standards.json"
    path.write_text('{"CUSTOM": {"DIE": {"co2_g_km": 130}}}')
    standards = load_euro_standards(path)
    report = compliance_rates(
        [("DIE", {"co2_g_km": 150.0, "nox_mg_km": None, "thc_mg_km": None,
                  "co_mg_km": None, "mpg": None})],
        standards["CUSTOM"],
    )
    assert report.rate("DIE", "co2_g_km") == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=1.0, max_value=500.0),
       st.floats(min_value=0.0, max_value=400.0))
def test_raising_thresholds_never_raises_rates(seed, threshold, bump):
    rng = np.random.default_rng(seed)
    rows = [diesel(nox=float(v)) for v in rng.uniform(0, 600, size=30)]
    low = EuroStandard("LOW", {"DIE": {"nox_mg_km": threshold}})
    high = EuroStandard("HIGH", {"DIE": {"nox_mg_km": threshold + bump}})
    assert compliance_rates(rows, high).rate("DIE", "nox_mg_km") <= \
        compliance_rates(rows, low).rate("DIE", "nox_mg_km")


# ---------------------------------------------------------------------------
# holdout accuracy


def matrix(*cols):
    out = np.empty((len(cols[0]), len(cols)), dtype=object)
    for i, c in enumerate(cols):
        out[:, i] = np.asarray(c)
    return out


def test_perfect_tree_r_is_one():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 6, 200).astype(float)
    y = np.where(x < 3, 10.0, 40.0)
    t = RegressionTree(cp=0.0, minsplit=2, minbucket=1, xval=0).fit(matrix(x), y)
    report = holdout_accuracy(t, matrix(x), y)
    assert report.pearson_r == pytest.approx(1.0, abs=1e-12)
    assert report.r_squared == pytest.approx(1.0, abs=1e-12)
    assert report.diagnostic is None


def test_constant_predictions_reported_nan():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([5.0, 5.0, 5.0, 5.0])
    t = RegressionTree(cp=0.0, minsplit=2, minbucket=1, xval=0).fit(matrix(x), y)
    report = holdout_accuracy(t, matrix(x), np.array([1.0, 2.0, 3.0, 4.0]))
    assert math.isnan(report.pearson_r)
    assert report.diagnostic is not None


def test_overlapping_groups_rejected():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = x.copy()
    t = RegressionTree(cp=0.0, minsplit=2, minbucket=1, xval=0).fit(matrix(x), y)
    with pytest.raises(ValueError, match="overlap"):
        holdout_accuracy(t, matrix(x), y, groups=["a", "b"], training_groups=["b", "c"])


def test_accuracy_curve_monotone_on_noiseless_data():
    rng = np.random.default_rng(6)
    x = rng.integers(0, 8, 600).astype(float)
    cc = rng.integers(0, 4, 600).astype(float)
    y = x * 10 + cc * 3
    t = RegressionTree(cp=0.0001, minsplit=4, minbucket=2, xval=0).fit(matrix(x, cc), y)
    report = holdout_accuracy(t, matrix(x, cc), y)
    r2 = [p.r_squared for p in report.curve if not math.isnan(p.r_squared)]
    assert all(b >= a - 1e-12 for a, b in zip(r2[:-1], r2[1:]))
    assert report.curve[-1].r_squared == pytest.approx(1.0, abs=1e-9)


def test_pearson_r_zero_variance_nan():
    assert math.isnan(pearson_r([1.0, 1.0], [1.0, 2.0]))


# ---------------------------------------------------------------------------
# writers


def test_fleet_summary_csv_gap_columns():
    obs = (
        [observation("exported", date(2015, 1, 1), 197.0, vid=f"E{i}") for i in range(10)]
        + [observation("scrapped", date(2015, 1, 1), 174.4, vid=f"S{i}") for i in range(10)]
    )
    buf = io.StringIO()
    write_fleet_summary(obs, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("fleet,metric,n,mean,median")
    exported_co2 = next(l for l in lines if l.startswith("exported,co2_g_km"))
    cells = exported_co2.split(",")
    assert float(cells[3]) == pytest.approx(197.0)
    assert float(cells[10]) == pytest.approx(22.6 / 174.4)


def test_daily_series_csv_smoothed(tmp_path):
    window = Window(date(2020, 1, 1), date(2020, 2, 19))
    obs = [observation("exported", date(2020, 1, 1) + timedelta(days=i),
                       150.0 + i, vid=f"V{i}") for i in range(50)]
    buf = io.StringIO()
    write_daily_series(obs, buf, window=window, span=0.3)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "fleet,date,metric,count,mean,smoothed"
    exported = [l for l in lines[1:] if l.startswith("exported") and ",1," in l]
    # linear series: smoothed equals the raw means
    first = exported[0].split(",")
    assert float(first[5]) == pytest.approx(float(first[4]), abs=1e-9)


def test_region_gaps_csv_total_row():
    obs = region_observations("R1", 10.0) + region_observations("R2", -4.0)
    report = region_gap_report(obs, min_n=30)
    buf = io.StringIO()
    write_region_gaps(report, buf)
    total = buf.getvalue().splitlines()[-1].split(",")
    assert total[0] == "TOTAL"
    assert float(total[5]) == 0.5


def test_compliance_csv():
    report = compliance_rates([diesel(nox=300.0), diesel(nox=100.0)], euro4(),
                              fleet="exported")
    buf = io.StringIO()
    write_compliance([report], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "standard,fleet,fuel,pollutant,n,failed,rate"
    joint = next(l for l in lines if ",joint," in l)
    assert joint.split(",")[1] == "exported"
    assert joint.split(",")[6] == "0.5"
