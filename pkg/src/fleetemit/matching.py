"""Exact record linkage between inspections and certification measurements.

Keys are (normalized make, normalized model, fuel type, model year); a
vehicle's model year is the calendar year of its first-use date. Matching
is exact only: fuzzy linkage would silently change which vehicles feed the
imputation models.
"""

from __future__ import annotations

import csv
import string
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from fleetemit.features import POLLUTANTS, YEAR_RANGE, feature_matrix, record_model_year
from fleetemit.ingest import EmissionsMeasurement, VehicleRecord

_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_name(text: str) -> str:
    """Case-fold, trim, strip punctuation, collapse internal whitespace."""
    return " ".join(text.translate(_PUNCT).casefold().split())


@dataclass(frozen=True, order=True)
class MatchKey:
    make: str
    model: str
    fuel_type: str
    model_year: int


def measurement_key(m: EmissionsMeasurement) -> MatchKey:
    return MatchKey(normalize_name(m.make), normalize_name(m.model),
                    m.fuel_type, m.model_year)


def record_key(rec: VehicleRecord) -> Optional[MatchKey]:
    year = record_model_year(rec)
    if year is None or rec.fuel_type is None:
        return None
    return MatchKey(normalize_name(rec.make), normalize_name(rec.model),
                    rec.fuel_type, year)


def record_fleet(rec: VehicleRecord) -> str:
    if rec.export_date is not None:
        return "exported"
    if rec.scrap_date is not None:
        return "scrapped"
    return "on_road"


def build_index(measurements: Iterable[EmissionsMeasurement]) -> dict:
    """MatchKey -> measurement with duplicate keys collapsed by mean.

    Each pollutant is averaged over the duplicate rows where it is present;
    a pollutant missing from every duplicate stays missing.
    """
    sums: dict = {}
    for m in measurements:
        key = measurement_key(m)
        entry = sums.setdefault(key, {"first": m, "acc": {p: [0.0, 0] for p in POLLUTANTS}})
        for p in POLLUTANTS:
            v = getattr(m, p)
            if v is not None:
                entry["acc"][p][0] += v
                entry["acc"][p][1] += 1
    index = {}
    for key, entry in sums.items():
        first = entry["first"]
        values = {
            p: (total / count if count else None)
            for p, (total, count) in entry["acc"].items()
        }
        index[key] = EmissionsMeasurement(
            make=first.make, model=first.model, model_year=first.model_year,
            fuel_type=first.fuel_type, **values,
        )
    return index


@dataclass
class MatchStats:
    # (fleet, test_class) -> [total, matched]
    cells: dict = field(default_factory=dict)

    def add(self, fleet: str, test_class, matched: bool) -> None:
        cell = self.cells.setdefault((fleet, test_class), [0, 0])
        cell[0] += 1
        if matched:
            cell[1] += 1

    @property
    def total(self) -> int:
        return sum(t for t, _ in self.cells.values())

    @property
    def matched(self) -> int:
        return sum(m for _, m in self.cells.values())

    def rate(self, fleet: Optional[str] = None, test_class=None) -> float:
        total = matched = 0
        for (f, c), (t, m) in self.cells.items():
            if fleet is not None and f != fleet:
                continue
            if test_class is not None and c != test_class:
                continue
            total += t
            matched += m
        return matched / total if total else 0.0


@dataclass
class MatchResult:
    matched: list  # (record, collapsed measurement) pairs
    unmatched: list  # records flagged for tree imputation
    stats: MatchStats


def match_records(records: Iterable[VehicleRecord], index: dict) -> MatchResult:
    """Split records into exact matches and pass-through unmatched."""
    result = MatchResult([], [], MatchStats())
    for rec in records:
        key = record_key(rec)
        m = index.get(key) if key is not None else None
        result.stats.add(record_fleet(rec), rec.test_class, m is not None)
        if m is None:
            result.unmatched.append(rec)
        else:
            result.matched.append((rec, m))
    return result


def write_match_stats(stats: MatchStats, destination) -> None:
    stream, should_close = (destination, False) if hasattr(destination, "write") else (
        open(destination, "w", encoding="utf-8", newline=""), True)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["fleet", "class", "total", "matched", "rate"])
        for (fleet, klass), (total, matched) in sorted(
            stats.cells.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))
        ):
            w.writerow([fleet, "" if klass is None else klass, total, matched,
                        format(matched / total, ".6g")])
    finally:
        if should_close:
            stream.close()


# ---------------------------------------------------------------------------
# training-table assembly


@dataclass
class TrainingTable:
    """Feature matrix, targets, and the match group of every row."""

    X: np.ndarray
    y: np.ndarray
    groups: list

    def __len__(self) -> int:
        return len(self.groups)


def observed_capacities(records: Iterable[VehicleRecord]) -> dict:
    """MatchKey -> mean observed engine capacity over matched class-4 records."""
    acc: dict = {}
    for rec in records:
        if rec.test_class != 4 or rec.engine_cc is None:
            continue
        key = record_key(rec)
        if key is None:
            continue
        total, count = acc.get(key, (0.0, 0))
        acc[key] = (total + rec.engine_cc, count + 1)
    return {key: total / count for key, (total, count) in acc.items()}


def build_training_tables(
    records: Iterable[VehicleRecord],
    measurements: Iterable[EmissionsMeasurement],
    year_range: tuple = YEAR_RANGE,
) -> dict:
    """Per-pollutant training tables from matched certification rows.

    Every raw certification row of a matched key becomes one training row
    (duplicates deliberately kept, so test-retest scatter stays in the
    targets). Features are the key's model year and fuel type plus the mean
    observed engine capacity of the key's matched records.
    """
    capacity = observed_capacities(records)
    rows = {p: [] for p in POLLUTANTS}
    targets = {p: [] for p in POLLUTANTS}
    groups = {p: [] for p in POLLUTANTS}
    lo, hi = year_range
    for m in measurements:
        key = measurement_key(m)
        cc = capacity.get(key)
        if cc is None or not lo <= key.model_year <= hi:
            continue
        features = (key.model_year, cc, key.fuel_type)
        for p in POLLUTANTS:
            v = getattr(m, p)
            if v is None:
                continue
            rows[p].append(features)
            targets[p].append(v)
            groups[p].append(key)
    return {
        p: TrainingTable(feature_matrix(rows[p]), np.asarray(targets[p], dtype=float), groups[p])
        for p in POLLUTANTS
        if rows[p]
    }


def split_by_group(table: TrainingTable, holdout_fraction: float, seed: int):
    """Group-disjoint split: every MatchKey lands wholly on one side."""
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in (0, 1)")
    keys = sorted(set(table.groups))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    n_holdout = max(1, int(round(holdout_fraction * len(keys))))
    holdout_keys = {keys[i] for i in order[:n_holdout]}
    mask = np.array([g in holdout_keys for g in table.groups])
    train = TrainingTable(table.X[~mask], table.y[~mask],
                          [g for g, m in zip(table.groups, mask) if not m])
    holdout = TrainingTable(table.X[mask], table.y[mask],
                            [g for g, m in zip(table.groups, mask) if m])
    return train, holdout
