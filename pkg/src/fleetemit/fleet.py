"""Fleet classification and the daily observation sets.

Exported and scrapped vehicles are observed on their disposition dates.
The on-road fleet samples one random test per vehicle per calendar year
(re-tests after failures would otherwise oversample unreliable vehicles),
restricted to used vehicles: those with at least one prior inspection on
record, i.e. two or more test events.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from datetime import date
from typing import Iterable, Optional

import numpy as np

from fleetemit.features import POLLUTANTS
from fleetemit.ingest import VehicleRecord, age_at

FLEETS = ("exported", "scrapped", "on_road")


@dataclass(frozen=True)
class Window:
    start: date
    end: date

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("window end precedes start")

    def contains(self, d: date) -> bool:
        return self.start <= d <= self.end


# The study period behind the shipped defaults.
DEFAULT_WINDOW = Window(date(2005, 1, 1), date(2021, 12, 31))


@dataclass
class FleetObservation:
    vehicle_id: str
    fleet: str
    observation_date: date
    age_years: float
    postcode_region: Optional[str] = None
    fuel_type: Optional[str] = None
    emissions: Optional[object] = None  # ImputedEmissions, attached by the pipeline


def _vehicle_rng(seed: int, vehicle_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(vehicle_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng((seed, int.from_bytes(digest, "big")))


def sample_on_road(records: Iterable[VehicleRecord], seed: int) -> dict:
    """One uniformly chosen test per (vehicle_id, calendar year).

    Deterministic for a seed and independent of record or test ordering:
    each vehicle draws from its own sub-stream and tests are ranked by
    date before sampling.
    """
    chosen = {}
    for rec in records:
        if not rec.tests:
            continue
        by_year: dict = {}
        for t in sorted(rec.tests, key=lambda t: (t.test_date, t.outcome, t.odometer or -1)):
            by_year.setdefault(t.test_date.year, []).append(t)
        rng = _vehicle_rng(seed, rec.vehicle_id)
        for year in sorted(by_year):
            tests = by_year[year]
            chosen[(rec.vehicle_id, year)] = tests[int(rng.integers(0, len(tests)))]
    return chosen


def classify(
    records: Iterable[VehicleRecord],
    window: Window = DEFAULT_WINDOW,
    seed: int = 0,
    on_road_before_disposition: bool = True,
) -> list:
    """Fleet observations for QC-clean records.

    Exported and scrapped observations are dated by the disposition date
    when it falls inside the window. On-road observations come from the
    per-year test sample of used vehicles; a disposed vehicle contributes
    on-road observations for tests before its disposition date when
    ``on_road_before_disposition`` is set, and none otherwise.
    """
    records = list(records)
    sampled = sample_on_road(records, seed)
    observations = []
    for rec in records:
        if rec.export_date is not None and window.contains(rec.export_date):
            observations.append(_observation(rec, "exported", rec.export_date))
        if rec.scrap_date is not None and window.contains(rec.scrap_date):
            observations.append(_observation(rec, "scrapped", rec.scrap_date))
        if len(rec.tests) < 2:
            continue  # never inspected before: not a used on-road vehicle
        disposition = rec.export_date or rec.scrap_date
        if disposition is not None and not on_road_before_disposition:
            continue
        for year in sorted({t.test_date.year for t in rec.tests}):
            test = sampled[(rec.vehicle_id, year)]
            if not window.contains(test.test_date):
                continue
            if disposition is not None and test.test_date >= disposition:
                continue
            observations.append(_observation(rec, "on_road", test.test_date))
    observations.sort(key=lambda o: (o.fleet, o.vehicle_id, o.observation_date))
    return observations


def _observation(rec: VehicleRecord, fleet: str, when: date) -> FleetObservation:
    return FleetObservation(
        vehicle_id=rec.vehicle_id,
        fleet=fleet,
        observation_date=when,
        age_years=age_at(rec, when),
        postcode_region=rec.postcode_region,
        fuel_type=rec.fuel_type,
    )


# ---------------------------------------------------------------------------
# observation CSV

OBSERVATIONS_HEADER = [
    "vehicle_id", "fleet", "observation_date", "age_years", "postcode_region",
    "fuel_type", *POLLUTANTS, "source_flags",
]


def write_fleet_observations(observations: Iterable[FleetObservation], destination) -> None:
    stream, should_close = (destination, False) if hasattr(destination, "write") else (
        open(destination, "w", encoding="utf-8", newline=""), True)
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(OBSERVATIONS_HEADER)
        for obs in observations:
            values = [""] * len(POLLUTANTS)
            flags = ""
            if obs.emissions is not None:
                values = [repr(obs.emissions.values[p]) for p in POLLUTANTS]
                flags = encode_source_flags(obs.emissions)
            w.writerow([
                obs.vehicle_id, obs.fleet, obs.observation_date.isoformat(),
                repr(obs.age_years), obs.postcode_region or "", obs.fuel_type or "",
                *values, flags,
            ])
    finally:
        if should_close:
            stream.close()


def read_fleet_observations(source) -> list:
    """Read back an observations CSV; emissions values land in a plain dict."""
    from fleetemit.impute import ImputedEmissions

    stream, should_close = (source, False) if hasattr(source, "read") else (
        open(source, "r", encoding="utf-8", newline=""), True)
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != OBSERVATIONS_HEADER:
            raise ValueError(f"observations header mismatch: {header}")
        observations = []
        for row in reader:
            (vid, fleet, when, age, region, fuel, *rest) = row
            raw_values, flags_text = rest[: len(POLLUTANTS)], rest[len(POLLUTANTS)]
            emissions = None
            if any(raw_values):
                values = {p: float(v) for p, v in zip(POLLUTANTS, raw_values)}
                sources, flags = decode_source_flags(flags_text)
                emissions = ImputedEmissions(vid, values, sources, flags)
            observations.append(FleetObservation(
                vehicle_id=vid, fleet=fleet, observation_date=date.fromisoformat(when),
                age_years=float(age), postcode_region=region or None,
                fuel_type=fuel or None, emissions=emissions,
            ))
        return observations
    finally:
        if should_close:
            stream.close()


def encode_source_flags(emissions) -> str:
    parts = [f"{p}={emissions.sources[p]}" for p in POLLUTANTS]
    parts.extend(f"flag:{f}" for f in emissions.flags)
    return ";".join(parts)


def decode_source_flags(text: str):
    sources = {}
    flags = []
    for part in text.split(";"):
        if not part:
            continue
        if part.startswith("flag:"):
            flags.append(part[len("flag:"):])
        else:
            name, _, source = part.partition("=")
            sources[name] = source
    return sources, tuple(flags)
