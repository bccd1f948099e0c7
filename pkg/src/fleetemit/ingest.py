"""Parsing and quality control for inspection and certification datasets.

Inspection files carry one row per test event (or one lifecycle-only row
for vehicles without tests); rows sharing a vehicle_id are merged into a
single record. Certification files carry one measurement row per
make/model/year/fuel test.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date
from typing import Optional

from fleetemit.features import FUEL_CODES

INSPECTIONS_HEADER = [
    "vehicle_id", "make", "model", "fuel_type", "engine_cc", "test_class",
    "first_use_date", "test_date", "outcome", "odometer", "postcode_region",
    "export_date", "scrap_date",
]

CERTIFICATIONS_HEADER = [
    "make", "model", "model_year", "fuel_type",
    "co2_g_km", "nox_mg_km", "thc_mg_km", "co_mg_km", "mpg",
]

DAYS_PER_YEAR = 365.25
MAX_AGE_YEARS = 110.0

QC_RULES = ("missing_required_field", "dual_disposition", "impossible_dates", "over_110_years")


@dataclass(frozen=True)
class TestEvent:
    __test__ = False  # keep pytest from collecting this as a test class

    test_date: date
    outcome: str  # "pass" | "fail"
    odometer: Optional[int] = None


@dataclass
class VehicleRecord:
    vehicle_id: str
    make: str = ""
    model: str = ""
    fuel_type: Optional[str] = None
    engine_cc: Optional[float] = None
    test_class: Optional[int] = None
    first_use_date: Optional[date] = None
    tests: list = field(default_factory=list)
    postcode_region: Optional[str] = None
    export_date: Optional[date] = None
    scrap_date: Optional[date] = None


@dataclass(frozen=True)
class EmissionsMeasurement:
    make: str
    model: str
    model_year: int
    fuel_type: str
    co2_g_km: Optional[float] = None
    nox_mg_km: Optional[float] = None
    thc_mg_km: Optional[float] = None
    co_mg_km: Optional[float] = None
    mpg: Optional[float] = None


@dataclass(frozen=True)
class Diagnostic:
    line: int
    message: str


@dataclass
class QcReport:
    total_input: int = 0
    total_retained: int = 0
    counts: dict = field(default_factory=lambda: {rule: 0 for rule in QC_RULES})

    @property
    def total_rejected(self) -> int:
        return sum(self.counts.values())

    def reconciles(self) -> bool:
        return self.total_input == self.total_retained + self.total_rejected


def _open(source):
    if hasattr(source, "read"):
        return source, False
    return open(source, "r", encoding="utf-8", newline=""), True


def _parse_date(text: str) -> Optional[date]:
    if not text:
        return None
    return date.fromisoformat(text)


def parse_inspections(source):
    """Parse an inspections CSV into merged vehicle records.

    Returns (records, diagnostics). Malformed rows are skipped with a
    line-numbered diagnostic; an unreadable stream or a wrong header is
    fatal.
    """
    stream, should_close = _open(source)
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != INSPECTIONS_HEADER:
            raise ValueError(f"inspections header mismatch: {header}")
        records: dict = {}
        diagnostics = []
        for line, row in enumerate(reader, start=2):
            try:
                _merge_inspection_row(records, row)
            except ValueError as exc:
                diagnostics.append(Diagnostic(line, str(exc)))
        return list(records.values()), diagnostics
    finally:
        if should_close:
            stream.close()


def _merge_inspection_row(records: dict, row: list) -> None:
    if len(row) != len(INSPECTIONS_HEADER):
        raise ValueError(f"expected {len(INSPECTIONS_HEADER)} fields, got {len(row)}")
    (vid, make, model, fuel, cc, klass, first_use, test_date, outcome,
     odometer, region, export, scrap) = (f.strip() for f in row)
    if not vid:
        raise ValueError("empty vehicle_id")
    if fuel and fuel not in FUEL_CODES:
        raise ValueError(f"unknown fuel type {fuel!r}")
    cc_value = None
    if cc:
        cc_value = float(cc)
        if not cc_value > 0:
            raise ValueError(f"engine_cc must be positive, got {cc}")
    class_value = None
    if klass:
        class_value = int(klass)
        if not 1 <= class_value <= 7:
            raise ValueError(f"test_class out of range: {klass}")
    event = None
    if test_date:
        outcome = outcome.lower()
        if outcome not in ("pass", "fail"):
            raise ValueError(f"bad outcome {outcome!r}")
        odo = None
        if odometer:
            odo = int(odometer)
            if odo < 0:
                raise ValueError("negative odometer")
        event = TestEvent(_parse_date(test_date), outcome, odo)
    # parse every date up front so a malformed row cannot half-merge
    first_use_value = _parse_date(first_use)
    export_value = _parse_date(export)
    scrap_value = _parse_date(scrap)

    rec = records.get(vid)
    if rec is None:
        rec = VehicleRecord(vehicle_id=vid)
        records[vid] = rec
    # first non-empty value wins for vehicle-level fields
    rec.make = rec.make or make
    rec.model = rec.model or model
    rec.fuel_type = rec.fuel_type or (fuel or None)
    rec.engine_cc = rec.engine_cc if rec.engine_cc is not None else cc_value
    rec.test_class = rec.test_class if rec.test_class is not None else class_value
    rec.first_use_date = rec.first_use_date or first_use_value
    rec.postcode_region = rec.postcode_region or (region or None)
    rec.export_date = rec.export_date or export_value
    rec.scrap_date = rec.scrap_date or scrap_value
    if event is not None:
        rec.tests.append(event)


def parse_certifications(source):
    """Parse a certifications CSV; rows keep at least one pollutant value."""
    stream, should_close = _open(source)
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != CERTIFICATIONS_HEADER:
            raise ValueError(f"certifications header mismatch: {header}")
        measurements = []
        diagnostics = []
        for line, row in enumerate(reader, start=2):
            try:
                measurements.append(_parse_certification_row(row))
            except ValueError as exc:
                diagnostics.append(Diagnostic(line, str(exc)))
        return measurements, diagnostics
    finally:
        if should_close:
            stream.close()


def _parse_certification_row(row: list) -> EmissionsMeasurement:
    if len(row) != len(CERTIFICATIONS_HEADER):
        raise ValueError(f"expected {len(CERTIFICATIONS_HEADER)} fields, got {len(row)}")
    make, model, year, fuel, co2, nox, thc, co, mpg = (f.strip() for f in row)
    if fuel not in FUEL_CODES:
        raise ValueError(f"unknown fuel type {fuel!r}")
    values = {}
    for name, text in (("co2_g_km", co2), ("nox_mg_km", nox), ("thc_mg_km", thc),
                       ("co_mg_km", co), ("mpg", mpg)):
        if not text:
            values[name] = None
            continue
        v = float(text)
        if v < 0 or (name == "mpg" and v == 0):
            raise ValueError(f"bad {name}: {text}")
        values[name] = v
    if all(v is None for v in values.values()):
        raise ValueError("row has no pollutant values")
    return EmissionsMeasurement(make=make, model=model, model_year=int(year),
                                fuel_type=fuel, **values)


def age_at(record: VehicleRecord, event_date: date) -> float:
    """Vehicle age in fractional years: exact day count over 365.25."""
    if record.first_use_date is None:
        raise ValueError("record has no first_use_date")
    days = (event_date - record.first_use_date).days
    if days < 0:
        raise ValueError("event precedes first use")
    return days / DAYS_PER_YEAR


def _event_dates(record: VehicleRecord):
    for t in record.tests:
        yield t.test_date
    if record.export_date is not None:
        yield record.export_date
    if record.scrap_date is not None:
        yield record.scrap_date


def qc_filter(records, max_age_years: float = MAX_AGE_YEARS,
              backdating_window_days: Optional[int] = None):
    """Apply the quality-control exclusions.

    Rules are checked in a fixed order and each rejected record counts
    against exactly one rule: missing required fields, dual disposition
    (both export and scrap dates), impossible date orderings (any event
    before first use, plus optional disposition back-dating beyond the
    configured window), and age above the cutoff at any event. Exactly
    ``max_age_years`` is retained; strictly older is rejected.
    """
    clean = []
    report = QcReport(total_input=len(records))
    for rec in records:
        rule = _qc_rejection(rec, max_age_years, backdating_window_days)
        if rule is None:
            clean.append(rec)
        else:
            report.counts[rule] += 1
    report.total_retained = len(clean)
    return clean, report


def _qc_rejection(rec: VehicleRecord, max_age_years, backdating_window_days):
    if rec.first_use_date is None:
        return "missing_required_field"
    if rec.export_date is not None and rec.scrap_date is not None:
        return "dual_disposition"
    if any(d < rec.first_use_date for d in _event_dates(rec)):
        return "impossible_dates"
    if backdating_window_days is not None and rec.tests:
        last_test = max(t.test_date for t in rec.tests)
        for disposition in (rec.export_date, rec.scrap_date):
            if disposition is not None and (last_test - disposition).days > backdating_window_days:
                return "impossible_dates"
    if any(age_at(rec, d) > max_age_years for d in _event_dates(rec)):
        return "over_110_years"
    return None


# ---------------------------------------------------------------------------
# writers (round-trip of the documented schemas)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, "g")
    return str(value)


def write_inspections(records, destination) -> None:
    """One row per test event; vehicles without tests get a lifecycle row."""
    stream, should_close = _open_write(destination)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(INSPECTIONS_HEADER)
        for rec in records:
            base = [
                rec.vehicle_id, rec.make, rec.model, _fmt(rec.fuel_type),
                _fmt(rec.engine_cc), _fmt(rec.test_class), _fmt(rec.first_use_date),
            ]
            tail = [_fmt(rec.postcode_region), _fmt(rec.export_date), _fmt(rec.scrap_date)]
            if rec.tests:
                for t in rec.tests:
                    w.writerow(base + [_fmt(t.test_date), t.outcome, _fmt(t.odometer)] + tail)
            else:
                w.writerow(base + ["", "", ""] + tail)
    finally:
        if should_close:
            stream.close()


def write_certifications(measurements, destination) -> None:
    stream, should_close = _open_write(destination)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(CERTIFICATIONS_HEADER)
        for m in measurements:
            w.writerow([
                m.make, m.model, m.model_year, m.fuel_type,
                _fmt(m.co2_g_km), _fmt(m.nox_mg_km), _fmt(m.thc_mg_km),
                _fmt(m.co_mg_km), _fmt(m.mpg),
            ])
    finally:
        if should_close:
            stream.close()


def _open_write(destination):
    if hasattr(destination, "write"):
        return destination, False
    return open(destination, "w", encoding="utf-8", newline=""), True
