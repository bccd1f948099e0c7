"""Per-vehicle emissions estimates for class-4 vehicles.

Estimates come from the five fitted pollutant trees, or from exact-matched
certification measurements when the prefer-measured policy is selected.
The trees never see vehicle age or event dates, so an estimate is fixed at
the vehicle's build characteristics (the functioning-as-new framing).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional

from fleetemit.features import POLLUTANTS, YEAR_RANGE, feature_matrix, record_features
from fleetemit.matching import record_key

IMPUTED_HEADER = [
    "vehicle_id", "fleet", "event_date",
    "co2_g_km", "nox_mg_km", "thc_mg_km", "co_mg_km", "mpg", "source_flags",
]

POLICIES = ("tree-imputed", "prefer-measured")

UNMATCHED_CATEGORY = "unmatched-category"

SKIP_REASONS = ("non_class4", "missing_feature", "invalid_feature")


@dataclass
class ImputedEmissions:
    vehicle_id: str
    values: dict  # pollutant -> value
    sources: dict  # pollutant -> "exact-match" | "tree-imputed"
    flags: tuple = ()


@dataclass
class ImputeResult:
    imputed: list
    skipped: dict = field(default_factory=lambda: {r: 0 for r in SKIP_REASONS})

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())


def impute_fleet(
    records: Iterable,
    trees: dict,
    index: Optional[dict] = None,
    policy: str = "tree-imputed",
    year_range: tuple = YEAR_RANGE,
) -> ImputeResult:
    """Impute all five pollutants for every eligible class-4 record.

    Non-class-4 records and records without usable features are skipped
    with a counted reason; output order follows input order.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    missing = [p for p in POLLUTANTS if p not in trees]
    if missing:
        raise ValueError(f"missing trees for: {missing}")
    records = list(records)

    result = ImputeResult(imputed=[])
    eligible = []
    feature_rows = []
    for rec in records:
        if rec.test_class != 4:
            result.skipped["non_class4"] += 1
            continue
        features, reason = record_features(rec, year_range)
        if features is None:
            result.skipped[reason] += 1
            continue
        eligible.append(rec)
        feature_rows.append(features)
    if not eligible:
        return result

    X = feature_matrix(feature_rows)
    predictions = {}
    flagged = None
    for p in POLLUTANTS:
        values, flags = trees[p].predict_flagged(X)
        predictions[p] = values
        flagged = flags if flagged is None else (flagged | flags)

    for i, rec in enumerate(eligible):
        measured = None
        if policy == "prefer-measured" and index is not None:
            key = record_key(rec)
            measured = index.get(key) if key is not None else None
        values = {}
        sources = {}
        for p in POLLUTANTS:
            m_value = getattr(measured, p) if measured is not None else None
            if m_value is not None:
                values[p] = float(m_value)
                sources[p] = "exact-match"
            else:
                values[p] = float(predictions[p][i])
                sources[p] = "tree-imputed"
        flags = (UNMATCHED_CATEGORY,) if flagged[i] else ()
        result.imputed.append(ImputedEmissions(rec.vehicle_id, values, sources, flags))
    return result


def write_imputed_emissions(observations: Iterable, destination) -> None:
    """Per-observation imputed values in the documented column layout.

    Observations without attached emissions (skipped vehicles) are omitted.
    """
    from fleetemit.fleet import encode_source_flags

    stream, should_close = (destination, False) if hasattr(destination, "write") else (
        open(destination, "w", encoding="utf-8", newline=""), True)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(IMPUTED_HEADER)
        for obs in observations:
            if obs.emissions is None:
                continue
            w.writerow([
                obs.vehicle_id, obs.fleet, obs.observation_date.isoformat(),
                *(repr(float(obs.emissions.values[p])) for p in POLLUTANTS),
                encode_source_flags(obs.emissions),
            ])
    finally:
        if should_close:
            stream.close()
