"""Fleet-level aggregates: summaries, time series, regional gaps,
compliance rates, and holdout accuracy.

Quantiles use linear interpolation between order statistics; box whiskers
follow the 1.5 x IQR rule clamped to actual data points. The time-series
smoother is classic locally weighted linear regression with tricube
weights and a nearest-neighbour bandwidth.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import timedelta
from importlib import resources
from typing import Iterable, Optional

import numpy as np

from fleetemit.cart import evaluation_cps
from fleetemit.features import POLLUTANTS
from fleetemit.fleet import FLEETS, Window

DEFAULT_LOWESS_SPAN = 0.25
DEFAULT_REGION_MIN_N = 30


# ---------------------------------------------------------------------------
# summary statistics


@dataclass(frozen=True)
class SummaryStats:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float


def summarize(values) -> SummaryStats:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("cannot summarize an empty sample")
    q1, median, q3 = (float(q) for q in np.quantile(v, [0.25, 0.5, 0.75]))
    iqr = q3 - q1
    low_fence, high_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    return SummaryStats(
        n=int(v.size),
        mean=float(v.mean()),
        median=median,
        q1=q1,
        q3=q3,
        whisker_low=float(v[v >= low_fence].min()),
        whisker_high=float(v[v <= high_fence].max()),
    )


@dataclass(frozen=True)
class GapReport:
    mean_gap: float
    mean_pct: float
    median_gap: float
    median_pct: float


def fleet_gap(stats_a: SummaryStats, stats_b: SummaryStats) -> GapReport:
    """Gaps of fleet a over fleet b: absolute and as a fraction of b."""
    mean_gap = stats_a.mean - stats_b.mean
    median_gap = stats_a.median - stats_b.median
    return GapReport(
        mean_gap=mean_gap,
        mean_pct=mean_gap / stats_b.mean,
        median_gap=median_gap,
        median_pct=median_gap / stats_b.median,
    )


# ---------------------------------------------------------------------------
# daily series and smoothing


@dataclass(frozen=True)
class DailyPoint:
    fleet: str
    date: object
    count: int
    mean: Optional[float]


def daily_series(observations, metric: str, window: Window) -> list:
    """One point per day per fleet across the window; empty days count 0."""
    acc: dict = {}
    for obs in observations:
        if obs.emissions is None or not window.contains(obs.observation_date):
            continue
        value = obs.emissions.values.get(metric)
        if value is None:
            continue
        cell = acc.setdefault((obs.fleet, obs.observation_date), [0.0, 0])
        cell[0] += value
        cell[1] += 1
    points = []
    day = window.start
    one = timedelta(days=1)
    days = []
    while day <= window.end:
        days.append(day)
        day += one
    for fleet in FLEETS:
        for day in days:
            total, count = acc.get((fleet, day), (0.0, 0))
            points.append(DailyPoint(fleet, day, count, total / count if count else None))
    return points


def lowess(x, y, span: float = DEFAULT_LOWESS_SPAN) -> np.ndarray:
    """Locally weighted linear regression with tricube weights.

    The bandwidth at each point reaches its ceil(span * n) nearest
    neighbour; no robustness iterations are applied.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if not 0 < span <= 1:
        raise ValueError("span must be in (0, 1]")
    if n < 2:
        raise ValueError("series too short to smooth")
    if x.max() == x.min():
        raise ValueError("degenerate x-range")
    r = min(int(math.ceil(span * n)), n - 1)
    yest = np.empty(n)
    for i in range(n):
        dx = x - x[i]
        h = np.sort(np.abs(dx))[r]
        if h == 0.0:
            w = (dx == 0.0).astype(float)
        else:
            w = (1.0 - np.clip(np.abs(dx) / h, 0.0, 1.0) ** 3) ** 3
        sw = w.sum()
        swx = (w * dx).sum()
        swxx = (w * dx * dx).sum()
        swy = (w * y).sum()
        swxy = (w * y * dx).sum()
        det = sw * swxx - swx * swx
        if det <= 0.0 or not np.isfinite(det):
            yest[i] = swy / sw
        else:
            # local line through x[i]; the intercept is the estimate
            yest[i] = (swxx * swy - swx * swxy) / det
    return yest


# ---------------------------------------------------------------------------
# regional gaps


@dataclass(frozen=True)
class RegionRow:
    region: str
    n_exported: int
    n_scrapped: int
    mean_exported: Optional[float]
    mean_scrapped: Optional[float]
    sufficient: bool

    @property
    def gap(self) -> Optional[float]:
        if self.mean_exported is None or self.mean_scrapped is None:
            return None
        return self.mean_exported - self.mean_scrapped


@dataclass
class RegionGapReport:
    rows: list
    min_n: int

    @property
    def sufficient_rows(self) -> list:
        return [r for r in self.rows if r.sufficient]

    @property
    def fraction_positive(self) -> float:
        rows = self.sufficient_rows
        if not rows:
            return float("nan")
        return sum(1 for r in rows if r.gap > 0) / len(rows)


def region_gap_report(observations, metric: str = "co2_g_km",
                      min_n: int = DEFAULT_REGION_MIN_N) -> RegionGapReport:
    """Per-region exported vs scrapped means.

    Regions need at least ``min_n`` observations in both fleets to count
    toward the positive-gap fraction; the rest are reported but marked
    insufficient.
    """
    acc: dict = {}
    for obs in observations:
        if obs.postcode_region is None or obs.emissions is None:
            continue
        if obs.fleet not in ("exported", "scrapped"):
            continue
        value = obs.emissions.values.get(metric)
        if value is None:
            continue
        cell = acc.setdefault(obs.postcode_region, {"exported": [0.0, 0], "scrapped": [0.0, 0]})
        cell[obs.fleet][0] += value
        cell[obs.fleet][1] += 1
    rows = []
    for region in sorted(acc):
        (es, en), (ss, sn) = acc[region]["exported"], acc[region]["scrapped"]
        rows.append(RegionRow(
            region=region,
            n_exported=en,
            n_scrapped=sn,
            mean_exported=es / en if en else None,
            mean_scrapped=ss / sn if sn else None,
            sufficient=en >= min_n and sn >= min_n,
        ))
    return RegionGapReport(rows=rows, min_n=min_n)


# ---------------------------------------------------------------------------
# EURO compliance


@dataclass(frozen=True)
class EuroStandard:
    name: str
    thresholds: dict  # fuel -> pollutant -> threshold

    def __post_init__(self):
        if not any(self.thresholds.values()):
            raise ValueError(f"standard {self.name} has no thresholds")
        for fuel, limits in self.thresholds.items():
            for pollutant, value in limits.items():
                if not value > 0:
                    raise ValueError(f"{self.name}/{fuel}/{pollutant}: threshold must be positive")


def load_euro_standards(path=None) -> dict:
    """Standard name -> EuroStandard from a JSON config file.

    Without a path the packaged defaults are used; those follow published
    EU type-approval limits and are configuration data, not measurements.
    """
    if path is None:
        text = resources.files("fleetemit").joinpath("euro_standards.json").read_text("utf-8")
    else:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    raw = json.loads(text)
    return {
        name: EuroStandard(name=name, thresholds={
            fuel: {p: float(v) for p, v in limits.items()}
            for fuel, limits in fuels.items()
        })
        for name, fuels in raw.items()
    }


@dataclass
class ComplianceReport:
    standard: str
    fleet: str = ""
    cells: dict = field(default_factory=dict)  # (fuel, pollutant|"joint") -> [n, failed]

    def _add(self, fuel: str, pollutant: str, failed: bool) -> None:
        cell = self.cells.setdefault((fuel, pollutant), [0, 0])
        cell[0] += 1
        if failed:
            cell[1] += 1

    def rate(self, fuel: Optional[str] = None, pollutant: str = "joint") -> float:
        total = failed = 0
        for (f, p), (n, bad) in self.cells.items():
            if fuel is not None and f != fuel:
                continue
            if p != pollutant:
                continue
            total += n
            failed += bad
        return failed / total if total else float("nan")


def compliance_rates(rows: Iterable[tuple], standard: EuroStandard,
                     fleet: str = "") -> ComplianceReport:
    """Failure fractions against a standard, per fuel type.

    ``rows`` are (fuel_type, values) pairs. A vehicle fails a pollutant
    when its value strictly exceeds the threshold (exactly at the limit
    passes); the joint criterion fails when any evaluable pollutant does.
    """
    report = ComplianceReport(standard=standard.name, fleet=fleet)
    for fuel, values in rows:
        limits = standard.thresholds.get(fuel)
        if not limits:
            continue
        any_evaluated = False
        any_failed = False
        for pollutant, threshold in limits.items():
            value = values.get(pollutant)
            if value is None:
                continue
            failed = value > threshold
            report._add(fuel, pollutant, failed)
            any_evaluated = True
            any_failed = any_failed or failed
        if any_evaluated:
            report._add(fuel, "joint", any_failed)
    return report


# ---------------------------------------------------------------------------
# holdout accuracy


def pearson_r(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        return float("nan")
    return float((da * db).sum() / denom)


@dataclass(frozen=True)
class CurvePoint:
    nsplit: int
    cp: float
    pearson_r: float
    r_squared: float


@dataclass
class AccuracyReport:
    pollutant: str
    pearson_r: float
    r_squared: float
    curve: list
    holdout_groups: int
    diagnostic: Optional[str] = None


def holdout_accuracy(tree, X, y, groups=None, training_groups=None,
                     pollutant: str = "") -> AccuracyReport:
    """Pearson accuracy of a tree on held-out rows, plus the depth curve.

    The curve evaluates every pruned-tree size from the complexity table.
    Raises when the holdout shares a match group with the training side.
    """
    if groups is not None and training_groups is not None:
        overlap = set(groups) & set(training_groups)
        if overlap:
            raise ValueError(f"holdout overlaps training groups: {len(overlap)} shared")
    y = np.asarray(y, dtype=float)
    preds = tree.predict(X)
    r = pearson_r(preds, y)
    diagnostic = None
    if math.isnan(r):
        diagnostic = "zero variance in predictions or targets; r undefined"
    curve = []
    for row, beta in zip(tree.cp_table_, evaluation_cps(tree.cp_table_)):
        pruned_preds = tree.predict_pruned(X, beta)
        pr = pearson_r(pruned_preds, y)
        curve.append(CurvePoint(row.nsplit, row.cp, pr, pr * pr))
    return AccuracyReport(
        pollutant=pollutant,
        pearson_r=r,
        r_squared=r * r,
        curve=curve,
        holdout_groups=len(set(groups)) if groups is not None else 0,
        diagnostic=diagnostic,
    )


# ---------------------------------------------------------------------------
# CSV emission


def _open_write(destination):
    if hasattr(destination, "write"):
        return destination, False
    return open(destination, "w", encoding="utf-8", newline=""), True


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_fleet_summary(observations, destination, metrics=POLLUTANTS) -> None:
    """Per-fleet summary stats plus gaps against the scrapped fleet."""
    stream, should_close = _open_write(destination)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow([
            "fleet", "metric", "n", "mean", "median", "q1", "q3",
            "whisker_low", "whisker_high",
            "mean_gap_vs_scrapped", "mean_pct_gap_vs_scrapped",
            "median_gap_vs_scrapped", "median_pct_gap_vs_scrapped",
        ])
        metrics = list(metrics) + ["age_years"]
        for metric in metrics:
            stats = {}
            for fleet in FLEETS:
                values = _metric_values(observations, fleet, metric)
                if values:
                    stats[fleet] = summarize(values)
            for fleet in FLEETS:
                if fleet not in stats:
                    continue
                s = stats[fleet]
                gap_cells = ["", "", "", ""]
                if fleet != "scrapped" and "scrapped" in stats:
                    g = fleet_gap(s, stats["scrapped"])
                    gap_cells = [_cell(g.mean_gap), _cell(g.mean_pct),
                                 _cell(g.median_gap), _cell(g.median_pct)]
                w.writerow([fleet, metric, s.n, _cell(s.mean), _cell(s.median),
                            _cell(s.q1), _cell(s.q3), _cell(s.whisker_low),
                            _cell(s.whisker_high), *gap_cells])
    finally:
        if should_close:
            stream.close()


def _metric_values(observations, fleet: str, metric: str) -> list:
    values = []
    for obs in observations:
        if obs.fleet != fleet:
            continue
        if metric == "age_years":
            values.append(obs.age_years)
        elif obs.emissions is not None:
            v = obs.emissions.values.get(metric)
            if v is not None:
                values.append(v)
    return values


def write_daily_series(observations, destination, metric: str = "co2_g_km",
                       window: Window = None, span: float = DEFAULT_LOWESS_SPAN) -> None:
    """Daily means per fleet with a smoothed column over non-empty days."""
    if window is None:
        raise ValueError("window is required")
    points = daily_series(observations, metric, window)
    smoothed: dict = {}
    for fleet in FLEETS:
        fleet_points = [p for p in points if p.fleet == fleet and p.count > 0]
        if len(fleet_points) >= 2:
            x = np.array([p.date.toordinal() for p in fleet_points], dtype=float)
            if x.max() > x.min():
                y = lowess(x, np.array([p.mean for p in fleet_points]), span)
                smoothed.update({(fleet, p.date): v for p, v in zip(fleet_points, y)})
    stream, should_close = _open_write(destination)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["fleet", "date", "metric", "count", "mean", "smoothed"])
        for p in points:
            w.writerow([
                p.fleet, p.date.isoformat(), metric, p.count,
                _cell(p.mean), _cell(smoothed.get((p.fleet, p.date))),
            ])
    finally:
        if should_close:
            stream.close()


def write_region_gaps(report: RegionGapReport, destination) -> None:
    stream, should_close = _open_write(destination)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["region", "n_exported", "n_scrapped", "mean_exported",
                    "mean_scrapped", "gap", "sufficient"])
        for r in report.rows:
            w.writerow([r.region, r.n_exported, r.n_scrapped, _cell(r.mean_exported),
                        _cell(r.mean_scrapped), _cell(r.gap), str(r.sufficient).lower()])
        w.writerow(["TOTAL", len(report.sufficient_rows), len(report.rows),
                    "", "", _cell(report.fraction_positive), ""])
    finally:
        if should_close:
            stream.close()


def write_compliance(reports: Iterable[ComplianceReport], destination) -> None:
    stream, should_close = _open_write(destination)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["standard", "fleet", "fuel", "pollutant", "n", "failed", "rate"])
        for report in reports:
            for (fuel, pollutant), (n, failed) in sorted(report.cells.items()):
                w.writerow([report.standard, report.fleet, fuel, pollutant, n, failed,
                            _cell(failed / n if n else None)])
    finally:
        if should_close:
            stream.close()


def write_accuracy_tables(entries, destination) -> None:
    """Rows per (pollutant, tree size): fit error, CV error, holdout accuracy.

    ``entries`` pairs each pollutant's fitted tree with its AccuracyReport.
    """
    stream, should_close = _open_write(destination)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["pollutant", "nsplit", "cp", "rel_error", "xerror", "xstd",
                    "holdout_r", "holdout_r2"])
        for pollutant, tree, report in entries:
            curve = {point.nsplit: point for point in report.curve}
            for row in tree.cp_table_:
                point = curve.get(row.nsplit)
                w.writerow([
                    pollutant, row.nsplit, _cell(row.cp), _cell(row.rel_error),
                    _cell(row.xerror), _cell(row.xstd),
                    _cell(point.pearson_r if point else None),
                    _cell(point.r_squared if point else None),
                ])
    finally:
        if should_close:
            stream.close()
